import numpy as np
import pytest

from poet.dataio import SynthConfig, build_vocab, collate, synth_generate
from poet.params import ModelConfig, init_params
from poet.vidgraph import GraphConfig


def make_setup(n_frames=3, n_parts=2, node_dim=6, n=2, seed=0, layers=2, word_dim=5, perturb=0.0):
    sc = SynthConfig(n_frames=n_frames, n_parts=n_parts, frame_dim=5, part_dim=4, min_aspects=2, max_aspects=4)
    samples = synth_generate(seed, n, sc)
    vocab = build_vocab(samples, 1)
    g = GraphConfig(n_frames, n_parts, 5, 4, node_dim, 3)
    params = init_params(ModelConfig(g, len(vocab), word_dim=word_dim, layers=layers), seed)
    if perturb:
        rng = np.random.default_rng(seed + 99)
        for t in params.tensors():
            t.data += rng.normal(0, perturb, size=t.shape)
    return samples, vocab, collate(samples, vocab), params


@pytest.fixture
def setup():
    return make_setup()


# one line per acceptance criterion, printed after the run
ACCEPTANCE_LINES: list[str] = []


def report_criterion(number: int, ok: bool, detail: str) -> None:
    line = f"criterion {number}: {'PASS' if ok else 'FAIL'}  {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line, flush=True)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
