"""Line-oriented dataset loaders.

Corpus is JSONL ({docid, text} per line), queries are TSV ("qid\\ttext"),
qrels are TREC text (see evalmetrics). All readers normalize CRLF,
reject duplicate ids naming both lines, and report malformed lines with
path and line number.
"""

import json
import warnings
from typing import List, Tuple

from .errors import FormatError
from .retrieval import Corpus


def load_corpus(path) -> Corpus:
    docs: List[Tuple[str, str]] = []
    seen = {}
    with open(path, "r", encoding="utf-8", newline=None) as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
                doc_id, text = obj["docid"], obj["text"]
            except (json.JSONDecodeError, KeyError, TypeError) as e:
                raise FormatError(f"malformed corpus line: {e}",
                                  path=str(path), line=lineno) from e
            if doc_id in seen:
                raise FormatError(
                    f"duplicate docid {doc_id!r} (first seen at line {seen[doc_id]})",
                    path=str(path), line=lineno)
            seen[doc_id] = lineno
            docs.append((doc_id, text))
    if not docs:
        warnings.warn(f"corpus file {path} is empty", UserWarning, stacklevel=2)
    return Corpus(tuple(docs))


def load_queries(path) -> List[Tuple[str, str]]:
    queries: List[Tuple[str, str]] = []
    seen = {}
    with open(path, "r", encoding="utf-8", newline=None) as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line.strip():
                continue
            if "\t" not in line:
                raise FormatError("query line needs qid<TAB>text",
                                  path=str(path), line=lineno)
            qid, text = line.split("\t", 1)
            if qid in seen:
                raise FormatError(
                    f"duplicate qid {qid!r} (first seen at line {seen[qid]})",
                    path=str(path), line=lineno)
            seen[qid] = lineno
            queries.append((qid, text))
    if not queries:
        warnings.warn(f"query file {path} is empty", UserWarning, stacklevel=2)
    return queries
