#!/usr/bin/env python3
"""Normalize the bundled public-domain corpora into one sentence per line.

Sources (both public domain, redistributed via npm by the stdlib project):
  * @stdlib/datasets-sotu       - U.S. State of the Union addresses
  * @stdlib/datasets-moby-dick  - Herman Melville, "Moby Dick"

Usage:
  npm pack @stdlib/datasets-sotu @stdlib/datasets-moby-dick
  mkdir sotu moby && tar xzf stdlib-datasets-sotu-*.tgz -C sotu \
      && tar xzf stdlib-datasets-moby-dick-*.tgz -C moby
  python3 scripts/prepare_corpora.py sotu/package/data moby/package/data/data.txt data/
"""
import pathlib
import re
import sys

TOKEN = re.compile(r"[a-z0-9]+(?:['’][a-z]+)*|[.,;:!?()\"]")
SENTENCE_END = {".", "!", "?"}
MIN_YEAR = 1901


def sentences(text):
    text = text.lower().replace("—", " -- ").replace("’", "'")
    tokens = TOKEN.findall(text)
    cur = []
    for tok in tokens:
        if tok in ("(", ")", '"'):
            continue
        cur.append(tok)
        if tok in SENTENCE_END:
            if len(cur) > 1:
                yield cur
            cur = []
    if len(cur) > 1:
        yield cur


def write(path, docs):
    n = 0
    with open(path, "w", encoding="utf-8") as out:
        for doc in docs:
            for sent in sentences(doc):
                n += len(sent)
                out.write(" ".join(sent) + "\n")
    print(f"{path}: {n} tokens")


def main():
    sotu_dir, moby_file, out_dir = map(pathlib.Path, sys.argv[1:4])
    sotu = sorted(p for p in sotu_dir.glob("*.txt") if int(p.name[:4]) >= MIN_YEAR)
    write(out_dir / "sotu.txt", (p.read_text(encoding="utf-8") for p in sotu))
    moby = moby_file.read_text(encoding="utf-8")
    moby = re.sub(r"CHAPTER \d+\.[^\n]*\n", "\n", moby)
    write(out_dir / "moby_dick.txt", [moby])


if __name__ == "__main__":
    main()
