#!/usr/bin/env python3
"""Maps GloVe word vectors onto the synset nodes of an edge file.

A node such as `sperm_whale.n.01` gets the mean of the vectors for the words
of its lemma (`sperm`, `whale`). Nodes with no known word are left out and
reported on stderr.

usage: node_embeddings.py GLOVE_TXT EDGES OUT
"""
import re
import sys


def lemma_words(node):
    lemma = node.rsplit(".n.", 1)[0]
    return [w for w in re.split(r"[_\-]", lemma.lower()) if w]


def main():
    if len(sys.argv) != 4:
        sys.exit(__doc__)
    glove, edges, out = sys.argv[1:]
    nodes = []
    for line in open(edges, encoding="utf-8"):
        if line.startswith("#") or not line.strip():
            continue
        for n in line.split():
            if n not in nodes:
                nodes.append(n)
    wanted = {w for n in nodes for w in lemma_words(n)}
    vectors = {}
    for line in open(glove, encoding="utf-8"):
        parts = line.rstrip().split(" ")
        if parts[0] in wanted:
            vectors[parts[0]] = [float(v) for v in parts[1:]]
    dim = len(next(iter(vectors.values())))
    missing = 0
    with open(out, "w", encoding="utf-8") as f:
        f.write("# node embeddings from %s\n" % glove)
        for n in nodes:
            vs = [vectors[w] for w in lemma_words(n) if w in vectors]
            if not vs:
                missing += 1
                continue
            mean = [sum(col) / len(vs) for col in zip(*vs)]
            f.write(n + " " + " ".join("%.6f" % v for v in mean) + "\n")
    print("%d nodes, %d without vectors, dim %d" % (len(nodes), missing, dim), file=sys.stderr)


if __name__ == "__main__":
    main()
