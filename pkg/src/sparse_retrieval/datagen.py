"""Seeded synthetic retrieval dataset generator.

Documents cluster into topics, each topic owning a pool of pseudo-words
(consonant-vowel syllables, so the hashing tokenizer maps them to stable
distinct ids). Every query paraphrases one source document by sampling
its salient words; qrels map the query to that document. Training
examples pair a paraphrase query with its source document plus negatives
drawn from other topics.

Everything is deterministic given the seed. Usage:

    python -m sparse_retrieval.datagen --out data/ --docs 1000 \
        --train 200 --queries 100 --seed 13
"""

import argparse
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

_CONSONANTS = list("bcdfgklmnprstvz")
_VOWELS = list("aeiou")


@dataclass(frozen=True)
class SyntheticDataset:
    corpus: list       # (doc_id, text)
    queries: list      # (query_id, text)
    qrels: dict        # query_id -> {doc_id}
    train: list        # {query, positive, negatives}


def _word(rng, syllables=3):
    return "".join(rng.choice(_CONSONANTS) + rng.choice(_VOWELS)
                   for _ in range(syllables))


def generate(num_docs=1000, num_train=200, num_queries=100, num_topics=20,
             seed=13) -> SyntheticDataset:
    if num_queries + num_train > num_docs:
        raise ValueError("need at least one distinct source doc per query/train pair")
    rng = np.random.default_rng(seed)

    topic_words = [[_word(rng) for _ in range(30)] for _ in range(num_topics)]
    fillers = [_word(rng, 2) for _ in range(40)]

    corpus = []
    doc_topics = []
    doc_words = []
    for i in range(num_docs):
        topic = int(rng.integers(num_topics))
        pool = topic_words[topic]
        n_words = int(rng.integers(15, 30))
        words = [pool[int(rng.integers(len(pool)))] for _ in range(n_words)]
        words += [fillers[int(rng.integers(len(fillers)))]
                  for _ in range(int(rng.integers(2, 6)))]
        rng.shuffle(words)
        corpus.append((f"d{i:05d}", " ".join(words)))
        doc_topics.append(topic)
        doc_words.append(words)

    def paraphrase(doc_idx):
        words = [w for w in doc_words[doc_idx] if w not in fillers]
        take = min(len(words), int(rng.integers(3, 7)))
        picked = list(rng.choice(words, size=take, replace=False))
        return " ".join(picked)

    # distinct source docs for eval queries and training pairs
    source_docs = rng.permutation(num_docs)[:num_queries + num_train]
    eval_sources = source_docs[:num_queries]
    train_sources = source_docs[num_queries:]

    queries = []
    qrels = {}
    for j, doc_idx in enumerate(eval_sources):
        qid = f"q{j:05d}"
        queries.append((qid, paraphrase(int(doc_idx))))
        qrels[qid] = {corpus[int(doc_idx)][0]}

    train = []
    for doc_idx in train_sources:
        doc_idx = int(doc_idx)
        topic = doc_topics[doc_idx]
        negatives = []
        while len(negatives) < 4:
            cand = int(rng.integers(num_docs))
            if doc_topics[cand] != topic:
                negatives.append(corpus[cand][1])
        train.append({
            "query": paraphrase(doc_idx),
            "positive": corpus[doc_idx][1],
            "negatives": negatives,
        })

    return SyntheticDataset(corpus, queries, qrels, train)


def write_dataset(dataset: SyntheticDataset, out_dir):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "corpus.jsonl", "w", encoding="utf-8") as fh:
        for doc_id, text in dataset.corpus:
            fh.write(json.dumps({"docid": doc_id, "text": text}) + "\n")
    with open(out / "queries.tsv", "w", encoding="utf-8") as fh:
        for qid, text in dataset.queries:
            fh.write(f"{qid}\t{text}\n")
    with open(out / "qrels.txt", "w", encoding="utf-8") as fh:
        for qid, docs in dataset.qrels.items():
            for doc_id in sorted(docs):
                fh.write(f"{qid} 0 {doc_id} 1\n")
    with open(out / "train.jsonl", "w", encoding="utf-8") as fh:
        for ex in dataset.train:
            fh.write(json.dumps(ex) + "\n")
    return {name: str(out / name) for name in
            ("corpus.jsonl", "queries.tsv", "qrels.txt", "train.jsonl")}


def main(argv=None):
    parser = argparse.ArgumentParser(description="generate a synthetic retrieval dataset")
    parser.add_argument("--out", required=True, help="output directory")
    parser.add_argument("--docs", type=int, default=1000)
    parser.add_argument("--train", type=int, default=200)
    parser.add_argument("--queries", type=int, default=100)
    parser.add_argument("--topics", type=int, default=20)
    parser.add_argument("--seed", type=int, default=13)
    args = parser.parse_args(argv)
    dataset = generate(args.docs, args.train, args.queries, args.topics, args.seed)
    paths = write_dataset(dataset, args.out)
    for name, path in paths.items():
        print(f"wrote {path}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
