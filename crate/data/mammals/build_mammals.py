#!/usr/bin/env python3
"""Builds the mammal hypernymy graph from a WordNet 3.0 database directory.

Writes one `child parent` edge per line using NLTK-style synset names
(`dog.n.01`). Nodes are mammal.n.01 and everything below it through
hyponym and instance-hyponym links. Two instance nodes named after common
English words (Affirmed, Assault) are dropped.

usage: build_mammals.py WORDNET_DICT_DIR OUT_EDGES
"""
import collections
import os
import sys

DROPPED = {"affirmed.n.01", "assault.n.03"}


def read_index(path):
    senses = {}
    for line in open(path, encoding="latin-1"):
        if line.startswith("  "):
            continue
        parts = line.split()
        lemma, n_synsets = parts[0], int(parts[2])
        offsets = parts[-n_synsets:]
        for i, off in enumerate(offsets):
            senses[(lemma, off)] = i + 1
    return senses


def read_data(path):
    words, hypo = {}, collections.defaultdict(set)
    for line in open(path, encoding="latin-1"):
        if line.startswith("  "):
            continue
        parts = line.split(" | ")[0].split()
        off, wcnt = parts[0], int(parts[3], 16)
        words[off] = [parts[4 + 2 * i] for i in range(wcnt)]
        i = 4 + 2 * wcnt
        pcnt = int(parts[i])
        i += 1
        for _ in range(pcnt):
            sym, poff, pos = parts[i:i + 3]
            i += 4
            if pos == "n" and sym in ("~", "~i"):
                hypo[off].add(poff)
    return words, hypo


def main():
    if len(sys.argv) != 3:
        sys.exit(__doc__)
    root_dir, out = sys.argv[1:]
    senses = read_index(os.path.join(root_dir, "index.noun"))
    words, hypo = read_data(os.path.join(root_dir, "data.noun"))

    def name(off):
        lemma = words[off][0].lower()
        lemma = lemma.split("(")[0]
        return "%s.n.%02d" % (lemma, senses[(lemma, off)])

    root = next(o for o, w in words.items() if w[0] == "mammal")
    seen, stack = {root}, [root]
    while stack:
        x = stack.pop()
        for y in hypo[x]:
            if y not in seen:
                seen.add(y)
                stack.append(y)
    keep = {o for o in seen if name(o) not in DROPPED}
    edges = sorted(
        (name(c), name(p)) for p in keep for c in hypo[p] if c in keep
    )
    with open(out, "w") as f:
        f.write("# mammal.n.01 hypernymy: child parent\n")
        for c, p in edges:
            f.write("%s %s\n" % (c, p))
    nodes = {n for e in edges for n in e}
    print("%d nodes, %d edges" % (len(nodes), len(edges)), file=sys.stderr)


if __name__ == "__main__":
    main()
