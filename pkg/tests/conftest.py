import pytest
import torch

from constradapt.data import SliceData, generate_synthetic, split_by_subject

torch.set_num_threads(1)


@pytest.fixture(scope="session")
def small_splits():
    """Manifests for a small 32x32 problem: 4 source and 5 target subjects of 10 slices."""
    src, tgt = generate_synthetic(5, 10, 32, 32, 2, "mri_like", 0)
    s = split_by_subject(src, {"train": 0.8, "val": 0.2})
    t = split_by_subject(tgt, {"train": 0.6, "val": 0.4})
    return {"source_train": s["train"], "source_val": s["val"],
            "target_train": t["train"], "target_val": t["val"]}


@pytest.fixture
def small(small_splits):
    # fresh handles per test so mask-read counters start at zero
    return {k: SliceData(m) for k, m in small_splits.items()}


def pytest_terminal_summary(terminalreporter):
    import sys
    mod = sys.modules.get("test_acceptance")
    if mod is not None and mod.RESULTS:
        terminalreporter.section("acceptance")
        for line in mod.RESULTS:
            terminalreporter.write_line(line)
