"""Session fixtures shared by the acceptance suite.

The trained-model fixtures are expensive (minutes); they run once per
session. Setting IDSPRITE_ACCEPT_CACHE to a directory persists the dataset
and trained weights across sessions, which is safe because training is
bit-deterministic for a fixed seed.
"""

import csv
import os
import time

import pytest

from idsprite.metrics import train_split
from idsprite.sprites import load_dataset, make_dataset
from idsprite.training import TrainConfig, load_models, train
from idsprite.unet import DenoiserConfig

ACCEPT_DATA_SEED = 11
ACCEPT_TRAIN_SEED = 0
ACCEPT_ITERS = 3000

_criterion_lines = []


@pytest.fixture(scope="session")
def criterion_report():
    """Record one pass/fail line per acceptance criterion; printed in the
    terminal summary so it survives pytest's output capture."""

    def record(number: int, name: str, passed: bool) -> None:
        line = f"criterion {number:2d} ({name}): {'PASS' if passed else 'FAIL'}"
        _criterion_lines.append((number, line))
        print(line)

    return record


def pytest_terminal_summary(terminalreporter):
    if _criterion_lines:
        terminalreporter.write_sep("=", "acceptance criteria")
        for _, line in sorted(_criterion_lines):
            terminalreporter.write_line(line)


def _cache_root():
    return os.environ.get("IDSPRITE_ACCEPT_CACHE")


@pytest.fixture(scope="session")
def accept_dataset(tmp_path_factory):
    """64 identities x 20 images, the acceptance-scale corpus."""
    cache = _cache_root()
    root = os.path.join(cache, "data") if cache else str(tmp_path_factory.mktemp("adata"))
    if not os.path.exists(os.path.join(root, "manifest.tsv")):
        make_dataset(n_ids=64, imgs_per_id=20, seed=ACCEPT_DATA_SEED, out_dir=root)
    return load_dataset(root)


def _train_cached(dataset, dirname, tmp_path_factory, reconstruction=False):
    cache = _cache_root()
    out = os.path.join(cache, dirname) if cache else str(tmp_path_factory.mktemp(dirname))
    meta = os.path.join(out, "meta.txt")
    log = os.path.join(out, "train_log.csv")
    if not os.path.exists(meta):
        cfg = TrainConfig(iters=ACCEPT_ITERS, seed=ACCEPT_TRAIN_SEED,
                          reconstruction=reconstruction)
        t0 = time.time()
        train(train_split(dataset, 0.2), DenoiserConfig(), cfg,
              log_path=log, ckpt_dir=out)
        with open(meta, "w", encoding="utf-8") as fh:
            fh.write(f"wall_seconds: {time.time() - t0:.1f}\n")
    denoiser, refnet = load_models(out)
    with open(log, newline="", encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    history = [(int(r["iter"]), float(r["loss"]), float(r["grad_norm"])) for r in rows]
    wall = None
    with open(meta, encoding="utf-8") as fh:
        for line in fh:
            if line.startswith("wall_seconds:"):
                wall = float(line.split(":")[1])
    return denoiser, refnet, history, wall


@pytest.fixture(scope="session")
def trained_main(accept_dataset, tmp_path_factory):
    """Cluster-trained model at the default configuration, 3000 iterations
    on the 80% training identities. Yields (denoiser, refnet, history, wall)."""
    return _train_cached(accept_dataset, "main_model", tmp_path_factory)


@pytest.fixture(scope="session")
def trained_recon(accept_dataset, tmp_path_factory):
    """Same budget and seed, but references are crops of the target itself."""
    return _train_cached(accept_dataset, "recon_model", tmp_path_factory,
                         reconstruction=True)
