import numpy as np
import pytest
from hypothesis import settings

from speechengine.audio import Waveform
from speechengine.synth import SynthSpec, generate_waveforms

settings.register_profile("default", deadline=None, max_examples=60)
settings.load_profile("default")

FIXTURES = __import__("pathlib").Path(__file__).parent / "fixtures"


def sine(freq, seconds=1.0, rate=16000, amp=1.0):
    t = np.arange(int(round(seconds * rate))) / rate
    return Waveform(amp * np.sin(2 * np.pi * freq * t), rate)


@pytest.fixture(scope="session")
def small_corpus():
    """4 classes x 10 speakers x 5 utterances, in memory."""
    return list(generate_waveforms(SynthSpec()))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


SER_CONFIG = """
[pretrain]
steps = 1500
[train]
max_steps = 300
eval_every_steps = 20
[protocol]
folds = 5
durations = []
averaging = "top_k(5)"
"""


@pytest.fixture(scope="session")
def ser_run(tmp_path_factory):
    """Synthetic SER corpus with a pretrained upstream: (cfg, out_dir, upstream)."""
    from speechengine import pipeline
    from speechengine.config import loads_config

    out = tmp_path_factory.mktemp("ser")
    cfg = loads_config(SER_CONFIG)
    pipeline.stage_synth(cfg, out)
    upstream = pipeline.ensure_upstream(cfg, out)
    return cfg, out, upstream


TINY_TOML = """
[synth]
num_classes = 3
num_speakers = 6
utterances_per_speaker_per_class = 3
duration_s = 0.8
[model]
d_model = 16
n_layers = 1
heads = 2
d_ff = 32
num_clusters = 8
[pretrain]
steps = 5
[kmeans]
max_iters = 5
[train]
max_steps = 20
eval_every_steps = 5
[protocol]
folds = 2
durations = [0.5]
n_per_class = [1, "full"]
"""


@pytest.fixture
def tiny_config(tmp_path):
    path = tmp_path / "tiny.toml"
    path.write_text(TINY_TOML)
    return path


def pytest_terminal_summary(terminalreporter):
    """One PASS/FAIL line per acceptance criterion that ran."""
    reports = [r for key in ("passed", "failed", "error")
               for r in terminalreporter.stats.get(key, [])
               if getattr(r, "when", "") == "call" and "test_criterion_" in r.nodeid]
    if not reports:
        return
    import sys
    details = getattr(sys.modules.get("test_acceptance"), "RESULTS", {})
    terminalreporter.section("acceptance criteria")
    for r in sorted(reports, key=lambda r: int(r.nodeid.split("test_criterion_")[1].split("_")[0])):
        n = int(r.nodeid.split("test_criterion_")[1].split("_")[0])
        status = "PASS" if r.passed else "FAIL"
        detail = details.get(n, (None, "did not complete"))[1]
        terminalreporter.write_line(f"criterion {n}: {status}  {detail}")
