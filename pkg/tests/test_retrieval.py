import math

import numpy as np
import pytest

from nestcon.errors import ConfigError, DegenerateVectorError, EvalError
from nestcon.model import ModelConfig, init_model
from nestcon.nested_loss import FusionParams, fuse_patient
from nestcon.retrieval import (
    ReferencePools,
    RetrievalPool,
    build_pools,
    extrapolate,
    histogram_density,
    load_reference_pools,
    nearest,
    nearest_rank_percentile,
    recall_at_k,
    save_reference_pools,
    similarity_diagnostics,
    write_diagnostics,
)
from nestcon.synthdata import GenConfig, generate

SMALL = ModelConfig(embed_dim=6, token_dim=4, hidden=(8, 8))


def cos(a, b):
    return float(np.dot(a, b) / (np.linalg.norm(a) * np.linalg.norm(b)))


def brute_argmax(pool, q):
    sims = [cos(q, e) for e in pool]
    return max(range(len(pool)), key=lambda i: (sims[i], -i))


class TestNearest:
    def test_exact_row(self, rng):
        pool = RetrievalPool(rng.standard_normal((10, 4)), [f"r{i}" for i in range(10)], "lesion")
        (pid, c), = nearest(pool, pool.embeddings[3], 1)
        assert pid == "r3" and c == pytest.approx(1.0, abs=1e-15)

    def test_antipodal(self):
        pool = RetrievalPool(np.array([[1.0, 0.0], [-1.0, 0.0]]), ["a", "b"], "lesion")
        assert nearest(pool, [1.0, 0.0], 2) == [("a", 1.0), ("b", -1.0)]

    def test_clamped_k_and_ties(self):
        pool = RetrievalPool(np.array([[1.0, 0.0], [2.0, 0.0], [0.0, 1.0]]), ["x", "y", "z"], "lesion")
        out = nearest(pool, [1.0, 0.0], 10)
        assert [i for i, _ in out] == ["x", "y", "z"]

    def test_exhaustive_oracle(self, rng):
        pool = RetrievalPool(rng.standard_normal((100, 8)), list(range(100)), "lesion")
        for _ in range(20):
            q = rng.standard_normal(8)
            got = [i for i, _ in nearest(pool, q, 100)]
            want = sorted(range(100), key=lambda i: (-cos(q, pool.embeddings[i]), i))
            assert got == want

    def test_invalid_pool(self):
        with pytest.raises(DegenerateVectorError):
            RetrievalPool(np.array([[0.0, 0.0]]), ["a"], "lesion")


class TestRecall:
    def test_self_queries(self, rng):
        pool = RetrievalPool(rng.standard_normal((30, 5)), list(range(30)), "lesion")
        r = recall_at_k(pool.embeddings, pool, list(range(30)), ks=(1, 30))
        assert r[1] == 100.0 and r[30] == 100.0

    def test_monotone_and_full(self, rng):
        pool = RetrievalPool(rng.standard_normal((40, 5)), list(range(40)), "lesion")
        r = recall_at_k(rng.standard_normal((25, 5)), pool, list(rng.integers(0, 40, 25)), ks=(1, 5, 10, 40))
        vals = [r[k] for k in (1, 5, 10, 40)]
        assert vals == sorted(vals) and vals[-1] == 100.0

    def test_missing_truth(self, rng):
        pool = RetrievalPool(rng.standard_normal((3, 2)), ["a", "b", "c"], "lesion")
        with pytest.raises(EvalError):
            recall_at_k(rng.standard_normal((1, 2)), pool, ["q"])


class TestPools:
    def test_single_record(self, rng):
        ds = generate(GenConfig(num_patients=1, lesions_per_patient_range=(1, 1), seed=0))
        pools = build_pools(ds, init_model(ds, SMALL, 0))
        assert (len(pools.lesion), len(pools.patient)) == (1, 1)

    def test_rows_are_encoder_outputs(self, small_dataset):
        model = init_model(small_dataset, SMALL, 0)
        pools = build_pools(small_dataset, model)
        lesions = list(small_dataset.lesions())
        for i in (0, 5):
            les = lesions[i][1]
            # batched and single-row BLAS calls may differ in the last ulp
            np.testing.assert_allclose(pools.lesion.embeddings[i], model.lesion.forward(les.meta, les.missing)[0],
                                       rtol=0, atol=1e-14)
        p = small_dataset.patients[2]
        np.testing.assert_allclose(pools.patient.embeddings[2], model.patient.forward(p.meta, p.missing)[0],
                                   rtol=0, atol=1e-14)
        again = build_pools(small_dataset, model)
        assert again.lesion.embeddings.tobytes() == pools.lesion.embeddings.tobytes()

    def test_round_trip(self, small_dataset, tmp_path):
        pools = build_pools(small_dataset, init_model(small_dataset, SMALL, 0))
        save_reference_pools(pools, tmp_path)
        back = load_reference_pools(tmp_path)
        assert back.owner == pools.owner
        assert back.lesion.ids == pools.lesion.ids
        np.testing.assert_array_equal(back.lesion.embeddings, pools.lesion.embeddings.astype(np.float32))


class TestExtrapolate:
    def setup_method(self):
        ref = generate(GenConfig(num_patients=10, lesions_per_patient_range=(5, 5), seed=4))
        self.ref = ref
        self.model = init_model(ref, SMALL, 0)
        self.pools = build_pools(ref, self.model)
        self.emb = self.model.embed(ref)

    def test_i2i_exact_match(self):
        out = extrapolate(self.emb["W"][7], self.pools, self.model.fusion, "I2I")
        np.testing.assert_array_equal(out.h[0], self.emb["H"][7])
        np.testing.assert_array_equal(out.x[0], self.emb["X"][self.emb["owner"][7]])

    def test_all_variants_vs_oracle(self, rng):
        H, X, owner = self.emb["H"], self.emb["X"], self.emb["owner"]
        Wq = rng.standard_normal((15, 6))
        f = self.model.fusion
        for variant in ("I2I", "I2L", "I2L2P"):
            out = extrapolate(Wq, self.pools, f, variant)
            for i, w in enumerate(Wq):
                if variant == "I2I":
                    l = brute_argmax(self.emb["W"], w)
                    p = owner[l]
                else:
                    l = brute_argmax(H, w)
                    if variant == "I2L":
                        p = owner[l]
                    else:
                        z, _ = fuse_patient(w[None], H[l][None], f)
                        p = brute_argmax(X, z)
                np.testing.assert_array_equal(out.h[i], H[l])
                np.testing.assert_array_equal(out.x[i], X[p])

    def test_scale_invariant_lesion_retrieval(self, rng):
        w = rng.standard_normal(6)
        a = extrapolate(w, self.pools, self.model.fusion, "I2L2P")
        b = extrapolate(3.7 * w, self.pools, self.model.fusion, "I2L2P")
        assert a.lesion_ids == b.lesion_ids

    def test_missing_owner_map(self, rng):
        bare = ReferencePools(self.pools.lesion, self.pools.patient)
        with pytest.raises(ConfigError):
            extrapolate(rng.standard_normal(6), bare, self.model.fusion, "I2L")
        with pytest.raises(ConfigError):
            extrapolate(rng.standard_normal(6), bare, self.model.fusion, "bogus")


class TestDiagnostics:
    def test_identical_pairs(self, rng):
        W = rng.standard_normal((20, 4))
        d = similarity_diagnostics(W, W.copy(), rng)
        np.testing.assert_allclose(d.percentiles.matching, 1.0, atol=1e-12)
        assert np.all(np.diff(d.percentiles.non_matching) >= 0)

    def test_non_matching_excludes_self(self):
        W = np.eye(3)
        d = similarity_diagnostics(W, W.copy(), np.random.default_rng(0), n_neg=50)
        assert np.all(d.non_matched == 0.0)

    def test_nearest_rank_oracle(self, rng):
        v = rng.standard_normal(1000)
        s = sorted(v)
        for p in (2, 10, 25, 50, 75, 90, 98):
            assert abs(nearest_rank_percentile(v, p) - s[math.ceil(p / 100 * 1000) - 1]) <= 1e-12
        assert nearest_rank_percentile([3.0, 1.0, 2.0], 50) == 2.0

    def test_histogram(self):
        left, dens = histogram_density(np.array([-1.0, 0.0, 0.01, 1.0]))
        assert len(left) == 40 and left[0] == -1.0
        assert dens.sum() * 0.05 == pytest.approx(1.0)

    def test_too_small_and_files(self, rng, tmp_path):
        with pytest.raises(EvalError):
            similarity_diagnostics(np.ones((1, 2)), np.ones((1, 2)), rng)
        d = similarity_diagnostics(rng.standard_normal((10, 3)), rng.standard_normal((10, 3)), rng)
        write_diagnostics(d, tmp_path)
        assert (tmp_path / "histogram.csv").read_text().splitlines()[0] == "bin_left,matched_density,retrieved_density"
        assert (tmp_path / "percentiles.csv").exists()
