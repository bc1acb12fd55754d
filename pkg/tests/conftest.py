import numpy as np
import pytest

from cyclingnet.pipeline import FlowCache, compute_clip_flows, load_manifest
from cyclingnet.synthetic import generate_corpus


@pytest.fixture(scope="session")
def corpus(tmp_path_factory):
    """Eight training clips of eight 24x32 frames, two validation clips, flows cached."""
    root = tmp_path_factory.mktemp("corpus")
    manifest = generate_corpus(root, n_clips=8, frames=8, size=(24, 32), seed=0, val_clips=2)
    clips = load_manifest(manifest)
    cache = FlowCache(root / "flow_cache", frame_size=(24, 32))
    for clip in clips:
        compute_clip_flows(clip, cache)
    return {"root": root, "manifest": manifest, "clips": clips, "cache": cache}


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


ACCEPTANCE = pytest.StashKey[list]()


def pytest_configure(config):
    config.stash[ACCEPTANCE] = []


@pytest.fixture
def verdict(request):
    """Record one PASS/FAIL line for an acceptance criterion, then assert it."""
    lines = request.config.stash[ACCEPTANCE]

    def record(number, title, ok, detail=""):
        line = f"criterion {number} {'PASS' if ok else 'FAIL'}: {title}" + (f" ({detail})" if detail else "")
        lines.append(line)
        print(line)
        assert ok, line

    return record


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(ACCEPTANCE, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda l: int(l.split()[1])):
            terminalreporter.write_line(line)
