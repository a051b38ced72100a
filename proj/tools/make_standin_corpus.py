#!/usr/bin/env python3
"""Build a text8-style corpus from the docstrings of the Python standard library.

Used when the real text8 file is not available. Output is lowercase a-z and
single spaces, no newline, like text8. Files are visited in sorted order so the
result is deterministic for a given Python installation.
"""

import ast
import pathlib
import re
import sys
import sysconfig

MAX_CHARS = 2_000_000
SKIP_PARTS = {"test", "tests", "idlelib", "site-packages", "dist-packages", "lib2to3", "__pycache__"}


def docstrings(path):
    try:
        tree = ast.parse(path.read_text(encoding="utf-8", errors="replace"))
    except (SyntaxError, ValueError):
        return
    for node in ast.walk(tree):
        if isinstance(node, (ast.Module, ast.ClassDef, ast.FunctionDef, ast.AsyncFunctionDef)):
            doc = ast.get_docstring(node, clean=True)
            if doc:
                yield doc


def main():
    out_path = pathlib.Path(sys.argv[1] if len(sys.argv) > 1 else "text8_standin.txt")
    root = pathlib.Path(sysconfig.get_paths()["stdlib"])
    pieces = []
    total = 0
    for path in sorted(root.rglob("*.py")):
        if SKIP_PARTS.intersection(path.relative_to(root).parts):
            continue
        for doc in docstrings(path):
            text = re.sub(r"[^a-z]+", " ", doc.lower()).strip()
            if text:
                pieces.append(text)
                total += len(text) + 1
        if total >= MAX_CHARS:
            break
    corpus = " ".join(pieces)[:MAX_CHARS]
    out_path.parent.mkdir(parents=True, exist_ok=True)
    out_path.write_text(" " + corpus, encoding="ascii")
    print(f"wrote {len(corpus) + 1} characters to {out_path}")


if __name__ == "__main__":
    main()
