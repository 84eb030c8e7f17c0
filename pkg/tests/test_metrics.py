"""Similarity, adherence, Frechet-distance, and benchmark-driver tests."""

import numpy as np
import pytest

from idsprite.attention import RefAttnConfig
from idsprite.diffusion import GuidanceWeights
from idsprite.metrics import (
    BenchmarkRow,
    BenchmarkSpec,
    MetricsReport,
    adherence,
    build_benchmark,
    fid,
    identity_sims,
    run_benchmark,
    strength_sweep,
    train_split,
)
from idsprite.refnet import build_reference_net
from idsprite.rng import Rng
from idsprite.sprites import load_dataset, make_dataset, make_identities, render
from idsprite.tensor import NumericError, matrix_sqrt_psd
from idsprite.unet import DenoiserConfig, build_denoiser


@pytest.fixture(scope="module")
def bench_setup(tmp_path_factory):
    root = str(tmp_path_factory.mktemp("data"))
    make_dataset(n_ids=10, imgs_per_id=6, seed=3, out_dir=root)
    ds = load_dataset(root)
    cfg = DenoiserConfig(base_channels=8, refattn=RefAttnConfig())
    den = build_denoiser(cfg, 0)
    ref = build_reference_net(cfg, 0)
    return ds, den, ref


class TestBenchmarkSpec:
    def test_holdout_is_last_fifth(self, bench_setup):
        ds, _, _ = bench_setup
        bm = build_benchmark(ds, 0.2, n_refs=4)
        assert [r.identity_id for r in bm.rows] == [8, 9]
        tr = train_split(ds, 0.2)
        assert tr.identity_ids == list(range(8))
        assert all(rec.identity_id < 8 for rec in tr.records)

    def test_rows_use_distinct_images(self, bench_setup):
        ds, _, _ = bench_setup
        for row in build_benchmark(ds, 0.2).rows:
            assert row.target_index not in row.ref_indices
            assert len(set(row.ref_indices)) == 4
            recs = [ds.records[i] for i in row.ref_indices + (row.target_index,)]
            assert {r.identity_id for r in recs} == {row.identity_id}

    def test_target_as_ref_rejected(self, bench_setup):
        ds, _, _ = bench_setup
        with pytest.raises(ValueError, match="target"):
            BenchmarkSpec(dataset=ds, rows=[BenchmarkRow(0, (1, 2, 3), 2)])

    def test_too_few_images(self, tmp_path):
        root = str(tmp_path / "d")
        make_dataset(n_ids=4, imgs_per_id=4, seed=0, out_dir=root)
        with pytest.raises(ValueError, match="images"):
            build_benchmark(load_dataset(root), 0.25, n_refs=4)

    def test_holdout_needs_training_ids(self, bench_setup):
        ds, _, _ = bench_setup
        with pytest.raises(ValueError):
            build_benchmark(ds, 1.0)


class TestIdentitySims:
    def test_self_similarity(self):
        ident = make_identities(0, 1)[0]
        a = render(ident, frozenset(), pose_seed=1)
        b = render(ident, frozenset(), pose_seed=2)
        sr, st = identity_sims(a, [b], a)
        assert st == pytest.approx(1.0, abs=1e-6)
        sr2, _ = identity_sims(a, [a, b], a)
        assert sr2 == pytest.approx(1.0, abs=1e-6)

    def test_max_over_refs(self):
        ids = make_identities(1, 2)
        gen = render(ids[0], frozenset(), pose_seed=3)
        near = render(ids[0], frozenset(), pose_seed=4)
        far = render(ids[1], frozenset(), pose_seed=5)
        sr_both, _ = identity_sims(gen, [far, near], gen)
        sr_near, _ = identity_sims(gen, [near], gen)
        sr_far, _ = identity_sims(gen, [far], gen)
        assert sr_both == pytest.approx(max(sr_near, sr_far))

    def test_requires_reference(self):
        ident = make_identities(2, 1)[0]
        s = render(ident, frozenset(), pose_seed=0)
        with pytest.raises(ValueError):
            identity_sims(s, [], s)


class TestAdherence:
    def test_detector_hits(self):
        ident = make_identities(3, 1)[0]
        s = render(ident, frozenset({"hat"}), pose_seed=1)
        assert adherence(s, ("a", "portrait", "with", "hat")) == 1.0
        assert adherence(s, ("a", "portrait", "with", "hat", "glasses")) == 0.5

    def test_vacuous_prompt(self):
        ident = make_identities(4, 1)[0]
        s = render(ident, frozenset(), pose_seed=1)
        assert adherence(s, ("a", "portrait", "plain")) == 1.0


class TestFid:
    def test_identical_sets(self):
        x = Rng(0).child("x").normal((200, 16)).astype(np.float64)
        assert fid(x, x) < 1e-6

    def test_symmetric(self):
        r = Rng(1)
        a = r.child("a").normal((60, 16)).astype(np.float64)
        b = 0.5 * r.child("b").normal((80, 16)).astype(np.float64) + 0.3
        assert abs(fid(a, b) - fid(b, a)) < 1e-6

    def test_one_dim_shifted_gaussians(self):
        r = Rng(2)
        a = r.child("a").normal((100000,)).astype(np.float64)[:, None]
        b = r.child("b").normal((100000,)).astype(np.float64)[:, None] + 1.0
        assert fid(a, b) == pytest.approx(1.0, rel=0.05)

    def test_translation_only(self):
        a = Rng(3).child("a").normal((500, 16)).astype(np.float64)
        b = a + 0.7
        want = 16 * 0.7 ** 2
        assert fid(a, b) == pytest.approx(want, rel=1e-4)

    def test_small_sets_regularized_not_rejected(self):
        r = Rng(4)
        a = r.child("a").normal((5, 16)).astype(np.float64)
        b = r.child("b").normal((6, 16)).astype(np.float64)
        assert fid(a, b) >= 0.0

    def test_argument_errors(self):
        x = Rng(5).child("x").normal((10, 4)).astype(np.float64)
        with pytest.raises(ValueError):
            fid(x[:1], x)
        with pytest.raises(ValueError):
            fid(x, Rng(5).child("y").normal((10, 5)).astype(np.float64))

    def test_matrix_sqrt_reconstruction(self):
        for seed in range(5):
            m = Rng(seed).child("m").normal((16, 16)).astype(np.float64)
            psd = m @ m.T
            root = matrix_sqrt_psd(psd).data
            assert float(np.abs(root @ root - psd).max()) < 1e-5


class TestReport:
    def test_paste_identity_enforced(self):
        w = GuidanceWeights()
        MetricsReport(0.5, 0.3, 0.5 - 0.3, 1.0, 0.0, w, 4, "decoder")
        with pytest.raises(ValueError):
            MetricsReport(0.5, 0.3, 0.1, 1.0, 0.0, w, 4, "decoder")


class TestRunBenchmark:
    def test_deterministic(self, bench_setup):
        ds, den, ref = bench_setup
        bm = build_benchmark(ds, 0.2)
        kw = dict(steps=5, seed=7, ref_timestep="zero")
        r1 = run_benchmark(den, ref, bm, GuidanceWeights(), **kw)
        r2 = run_benchmark(den, ref, bm, GuidanceWeights(), **kw)
        assert r1 == r2
        assert r1.paste == r1.sim_ref - r1.sim_target
        assert -1.0 <= r1.sim_ref <= 1.0 and -1.0 <= r1.sim_target <= 1.0
        assert 0.0 <= r1.adherence <= 1.0 and r1.fid >= 0.0

    def test_n_refs_validation(self, bench_setup):
        ds, den, ref = bench_setup
        bm = build_benchmark(ds, 0.2)
        with pytest.raises(ValueError):
            run_benchmark(den, ref, bm, GuidanceWeights(), n_refs=5, steps=5)

    def test_csv_written(self, bench_setup, tmp_path):
        ds, den, ref = bench_setup
        bm = build_benchmark(ds, 0.2)
        path = str(tmp_path / "rows.csv")
        run_benchmark(den, ref, bm, GuidanceWeights(), steps=5, seed=1,
                      ref_timestep="zero", csv_path=path)
        lines = open(path, encoding="utf-8").read().splitlines()
        assert lines[0] == "row,sim_ref,sim_target,paste,adherence"
        assert len(lines) == 1 + len(bm.rows)

    def test_errors_name_the_row(self, bench_setup):
        ds, den, ref = bench_setup
        bm = build_benchmark(ds, 0.2)
        poisoned = build_denoiser(den.config, 0)
        poisoned.params()["out.c.w"].data[:] = np.nan
        with pytest.raises(NumericError, match="row 0"):
            run_benchmark(poisoned, ref, bm, GuidanceWeights(), steps=5)


class TestStrengthSweep:
    def test_grid_and_consistency(self, bench_setup, tmp_path):
        ds, den, ref = bench_setup
        bm = build_benchmark(ds, 0.2)
        path = str(tmp_path / "sweep.csv")
        out = strength_sweep(den, ref, bm, [0.0, 0.85], [2.0], steps=5, seed=2,
                             ref_timestep="zero", csv_path=path)
        assert [(f, r) for f, r, _ in out] == [(0.0, 2.0), (0.85, 2.0)]
        lines = open(path, encoding="utf-8").read().splitlines()
        assert lines[0] == "lambda_feat,lambda_ref,sim_target,paste,adherence,fid"
        assert len(lines) == 3
        # a grid point at the default weights reproduces run_benchmark exactly
        direct = run_benchmark(den, ref, bm, GuidanceWeights(), steps=5, seed=2,
                               ref_timestep="zero")
        assert out[1][2] == direct

    def test_grid_validation(self, bench_setup):
        ds, den, ref = bench_setup
        bm = build_benchmark(ds, 0.2)
        with pytest.raises(ValueError):
            strength_sweep(den, ref, bm, [], [2.0])
        with pytest.raises(ValueError):
            strength_sweep(den, ref, bm, [1.5], [2.0])
        with pytest.raises(ValueError):
            strength_sweep(den, ref, bm, [0.5], [5.0])
