"""Forward-pass parity between a reference checkpoint and a converted model.

Fixtures are token-id sequences (tokenization happens in this package,
never in the primary component). Each fixture runs through the
reference model and the primary encoder; the report records the maximum
absolute deviation of the final hidden states per fixture, and on
failure attributes the first layer whose output diverges past the
threshold.
"""

import json
from dataclasses import dataclass, asdict

import numpy as np

from sparse_retrieval import modelio
from sparse_retrieval.encoder import TokenSequence, forward

from .convert import load_checkpoint

DEFAULT_THRESHOLD = 1e-3


@dataclass
class FixtureResult:
    index: int
    max_abs_dev: float
    passed: bool
    first_divergent_layer: int = -1  # -1 when within threshold everywhere


@dataclass
class ParityReport:
    threshold: float
    results: list
    passed: bool
    worst_dev: float

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2)


def load_fixtures(path):
    fixtures = []
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line:
                fixtures.append(json.loads(line))
    return fixtures


def verify_parity(source, model_file, fixtures, threshold=DEFAULT_THRESHOLD) -> ParityReport:
    """Compare reference hidden states against the primary encoder's.

    `fixtures` is a path to a fixture JSONL or a list of {ids, mask}
    dicts. Sequences run one at a time (batch 1), unpadded.
    """
    import torch

    reference, _, _ = load_checkpoint(source)
    reference.eval()
    weights = modelio.load_model(model_file)
    if isinstance(fixtures, (str,)) or hasattr(fixtures, "__fspath__"):
        fixtures = load_fixtures(fixtures)

    results = []
    worst = 0.0
    for i, fixture in enumerate(fixtures):
        ids = np.asarray(fixture["ids"], dtype=np.int64)
        mask = np.asarray(fixture["mask"], dtype=np.int64)
        if ids.shape != mask.shape:
            raise ValueError(f"fixture {i}: ids and mask shapes differ")
        with torch.no_grad():
            out = reference(input_ids=torch.from_numpy(ids[np.newaxis]),
                            attention_mask=torch.from_numpy(mask[np.newaxis]),
                            output_hidden_states=True)
        ref_final = out.last_hidden_state[0].numpy()
        ref_states = [h[0].numpy() for h in out.hidden_states]

        seq = TokenSequence(ids.astype(np.int32), mask.astype(np.int8))
        hidden, states = forward(weights, [seq], return_layer_states=True)
        dev = float(np.abs(hidden[0] - ref_final).max())
        worst = max(worst, dev)

        first_divergent = -1
        if dev > threshold:
            for layer_idx, (ref_h, got_h) in enumerate(zip(ref_states, states)):
                if float(np.abs(got_h[0] - ref_h).max()) > threshold:
                    first_divergent = layer_idx  # 0 = embedding output
                    break
        results.append(FixtureResult(index=i, max_abs_dev=dev,
                                     passed=dev <= threshold,
                                     first_divergent_layer=first_divergent))
    return ParityReport(threshold=threshold, results=results,
                        passed=all(r.passed for r in results), worst_dev=worst)
