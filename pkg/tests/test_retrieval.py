import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from nlivec import numerics as nx
from nlivec import retrieval as rt
from nlivec.numerics import Tensor


def sort_oracle_rank(scores, gold):
    """Sort every candidate, gold after equal-scoring non-gold, return 1-based rank."""
    order = sorted(range(len(scores)), key=lambda j: (-scores[j], bool(gold[j])))
    return 1 + next(pos for pos, j in enumerate(order) if gold[j])


def oracle_metrics(S, owner, Ks):
    n_cap, n_img = S.shape
    img_ranks = [sort_oracle_rank(S[c], [owner[c] == j for j in range(n_img)]) for c in range(n_cap)]
    cap_ranks = [sort_oracle_rank(S[:, j], [owner[c] == j for c in range(n_cap)]) for j in range(n_img)]

    def summarise(ranks):
        out = {f"R@{K}": sum(r <= K for r in ranks) / len(ranks) for K in Ks}
        out["MedR"] = float(np.median(ranks))
        return out

    return {"caption_retrieval": summarise(cap_ranks), "image_retrieval": summarise(img_ranks)}


def identity_proj(dim, margin=0.2, k=3):
    eye = np.eye(dim)
    return rt.ProjectionPair(Tensor(eye.copy(), requires_grad=True), Tensor(eye.copy(), requires_grad=True), margin, k)


class TestLoss:
    def test_margin_satisfied_is_zero(self):
        n, k = 6, 3
        S = np.full((n, n), 0.7)
        np.fill_diagonal(S, 1.0)
        cap_neg, img_neg = rt.sample_negatives(np.arange(n), k, np.random.default_rng(0))
        assert rt.hinge_loss_from_similarity(Tensor(S), cap_neg, img_neg, 0.2).item() == 0.0

    @pytest.mark.parametrize("k", [1, 3, 5])
    def test_tied_is_two_k_n_alpha(self, k):
        n = 8
        S = np.full((n, n), 0.4)
        cap_neg, img_neg = rt.sample_negatives(np.arange(n), k, np.random.default_rng(k))
        loss = rt.hinge_loss_from_similarity(Tensor(S), cap_neg, img_neg, 0.2).item()
        assert loss == pytest.approx(2 * k * n * 0.2, rel=1e-12)

    def test_tied_through_projection(self):
        # all captions and images equal, so every cosine is 1
        n, k = 5, 4
        x = np.ones((n, 3))
        proj = identity_proj(3, k=k)
        cap_neg, img_neg = rt.sample_negatives(np.arange(n), k, np.random.default_rng(0))
        loss = rt.ranking_loss(x, x, proj, cap_neg, img_neg).item()
        assert loss == pytest.approx(2 * k * n * 0.2, rel=1e-12)

    def test_four_image_toy_matches_double_loop(self, rng):
        caps, imgs = rng.normal(size=(4, 5)), rng.normal(size=(4, 6))
        cfg = rt.RetrievalConfig(n_contrastive=3, joint_dim=4, seed=2)
        proj = rt.init_projection(5, 6, cfg)
        cap_neg, img_neg = rt.sample_negatives(np.arange(4), 3, rng)
        S = rt.similarity(caps, imgs, proj).data
        got = rt.ranking_loss(caps, imgs, proj, cap_neg, img_neg).item()
        assert got == pytest.approx(rt.hinge_loss_bruteforce(S, cap_neg, img_neg, 0.2), rel=1e-12)

    def test_similarity_is_cosine(self, rng):
        caps, imgs = rng.normal(size=(3, 4)), rng.normal(size=(2, 4))
        proj = identity_proj(4)
        S = rt.similarity(caps, imgs, proj).data
        for i in range(3):
            for j in range(2):
                c = caps[i] @ imgs[j] / np.linalg.norm(caps[i]) / np.linalg.norm(imgs[j])
                assert S[i, j] == pytest.approx(c, abs=1e-14)

    def test_zero_norm_rejected(self):
        proj = identity_proj(3)
        with pytest.raises(rt.RetrievalError, match="zero-norm"):
            rt.similarity(np.zeros((1, 3)), np.ones((1, 3)), proj)

    @given(st.integers(0, 10_000))
    def test_non_negative_and_zero_iff_margin(self, seed):
        rng = np.random.default_rng(seed)
        n, k = 5, 2
        S = rng.uniform(-1, 1, (n, n))
        cap_neg, img_neg = rt.sample_negatives(np.arange(n), k, rng)
        loss = rt.hinge_loss_from_similarity(Tensor(S), cap_neg, img_neg, 0.2).item()
        assert loss >= 0
        rows = np.arange(n)[:, None]
        satisfied = np.all(S.diagonal()[:, None] >= S[cap_neg, rows] + 0.2) and np.all(
            S.diagonal()[:, None] >= S[rows, img_neg] + 0.2
        )
        assert (loss == 0) == satisfied

    def test_gradient(self, rng):
        caps, imgs = rng.normal(size=(4, 5)), rng.normal(size=(4, 3))
        proj = rt.init_projection(5, 3, rt.RetrievalConfig(n_contrastive=2, joint_dim=4, seed=1))
        cap_neg, img_neg = rt.sample_negatives(np.arange(4), 2, rng)
        err = nx.grad_check(lambda: rt.ranking_loss(caps, imgs, proj, cap_neg, img_neg), proj.parameters())
        assert err < 1e-3

    def test_config_validation(self):
        assert (rt.RetrievalConfig().margin, rt.RetrievalConfig().n_contrastive) == (0.2, 30)
        with pytest.raises(rt.RetrievalError):
            rt.RetrievalConfig(margin=0)
        with pytest.raises(rt.RetrievalError):
            rt.RetrievalConfig(n_contrastive=0)


class TestNegatives:
    def test_excludes_own_image(self, rng):
        owner = np.repeat(np.arange(6), 3)
        cap_neg, img_neg = rt.sample_negatives(owner, 4, rng)
        for n in range(len(owner)):
            assert np.all(owner[cap_neg[n]] != owner[n])
            imgs = owner[img_neg[n]]
            assert len(set(imgs)) == 4 and owner[n] not in imgs
            assert len(set(cap_neg[n])) == 4

    def test_too_few_images(self, rng):
        with pytest.raises(rt.RetrievalError, match="k\\+1"):
            rt.sample_negatives(np.arange(3), 3, rng)

    def test_seeded(self):
        a = rt.sample_negatives(np.arange(10), 3, np.random.default_rng(5))
        b = rt.sample_negatives(np.arange(10), 3, np.random.default_rng(5))
        assert all(np.array_equal(x, y) for x, y in zip(a, b))


class TestMetrics:
    def test_identity_structure(self):
        S = np.eye(10)
        m = rt.metrics_from_similarity(S, np.arange(10))
        for d in ("caption_retrieval", "image_retrieval"):
            assert m[d]["R@1"] == 1.0 and m[d]["MedR"] == 1.0

    def test_adversarial_structure(self):
        S = -np.eye(10) + np.arange(10)[None, :] * 1e-3 + np.arange(10)[:, None] * 1e-3
        m = rt.metrics_from_similarity(S, np.arange(10))
        for d in ("caption_retrieval", "image_retrieval"):
            assert m[d]["R@1"] == 0.0 and m[d]["R@5"] == 0.0 and m[d]["MedR"] == 10.0

    def test_ties_are_pessimistic(self):
        ranks = rt.gold_ranks(np.array([[0.5, 0.5, 0.5]]), np.array([[True, False, False]]))
        assert ranks.tolist() == [3]

    @pytest.mark.parametrize("seed", range(5))
    def test_random_20x20_matches_sort_oracle(self, seed):
        rng = np.random.default_rng(seed)
        S = rng.normal(size=(20, 20))
        owner = np.arange(20)
        assert rt.metrics_from_similarity(S, owner) == oracle_metrics(S, owner, (1, 5, 10))

    def test_multi_caption_with_ties_matches_oracle(self, rng):
        # coarse values force plenty of ties
        S = np.round(rng.uniform(size=(40, 8)), 1)
        owner = np.repeat(np.arange(8), 5)
        assert rt.metrics_from_similarity(S, owner, (1, 5)) == oracle_metrics(S, owner, (1, 5))

    def test_k_larger_than_pool(self):
        with pytest.raises(rt.RetrievalError, match="exceeds"):
            rt.metrics_from_similarity(np.eye(4), np.arange(4), (1, 5))

    @given(st.integers(0, 10_000))
    def test_recall_monotone_and_bounded(self, seed):
        rng = np.random.default_rng(seed)
        S = rng.normal(size=(12, 12))
        m = rt.metrics_from_similarity(S, np.arange(12), (1, 2, 5, 10, 12))
        for d in m.values():
            rs = [d[f"R@{K}"] for K in (1, 2, 5, 10, 12)]
            assert all(0 <= r <= 1 for r in rs)
            assert rs == sorted(rs) and rs[-1] == 1.0
            assert d["MedR"] >= 1

    @given(st.floats(1e-3, 1e3))
    def test_scale_invariance(self, c):
        rng = np.random.default_rng(7)
        imgs, caps = rng.normal(size=(10, 4)), rng.normal(size=(20, 4))
        owner = np.repeat(np.arange(10), 2)
        proj = rt.init_projection(4, 4, rt.RetrievalConfig(seed=3, n_contrastive=2))
        base = rt.evaluate_retrieval(proj, imgs, caps, owner, (1, 5), splits=2)
        scaled = rt.evaluate_retrieval(proj, c * imgs, caps, owner, (1, 5), splits=2)
        assert base == scaled

    def test_fold_average(self, rng):
        imgs, caps = rng.normal(size=(20, 3)), rng.normal(size=(20, 3))
        owner = np.arange(20)
        proj = identity_proj(3)
        got = rt.evaluate_retrieval(proj, imgs, caps, owner, (1, 2), splits=4, seed=9)
        per_fold = []
        for fold in rt.image_folds(20, 4, 9):
            S = rt.similarity(caps[fold], imgs[fold], proj).data
            per_fold.append(oracle_metrics(S, np.arange(len(fold)), (1, 2)))
        assert got["folds"] == 4
        for d in ("caption_retrieval", "image_retrieval"):
            for key in ("R@1", "R@2", "MedR"):
                assert got[d][key] == pytest.approx(np.mean([f[d][key] for f in per_fold]), abs=1e-15)

    def test_too_many_folds(self):
        with pytest.raises(rt.RetrievalError):
            rt.image_folds(3, 4, 0)


def mirrored_corpus(n_images, dim, seed, per_image=2):
    rng = np.random.default_rng(seed)
    imgs = rng.normal(size=(n_images, dim))
    owner = np.repeat(np.arange(n_images), per_image)
    return imgs, imgs[owner].copy(), owner


class TestTraining:
    def test_mirror_corpus_reaches_r1(self):
        # 8 dims is too cramped for 20 random images at margin 0.2
        imgs, caps, owner = mirrored_corpus(20, 16, 0)
        cfg = rt.RetrievalConfig(n_contrastive=5, lr=0.5, epochs=60, batch_size=50, seed=0)
        res = rt.train_retrieval((imgs, caps, owner), (imgs, caps, owner), cfg)
        m = rt.evaluate_retrieval(res.projection, imgs, caps, owner, (1, 5), splits=1)
        assert m["caption_retrieval"]["R@1"] == 1.0
        assert m["image_retrieval"]["R@1"] == 1.0
        assert res.history[res.best_epoch - 1]["loss"] < 1e-3

    def test_too_few_images(self):
        imgs, caps, owner = mirrored_corpus(5, 4, 0)
        with pytest.raises(rt.RetrievalError, match="k\\+1"):
            rt.train_retrieval((imgs, caps, owner), (imgs, caps, owner), rt.RetrievalConfig(n_contrastive=5))

    def test_seeded_runs_reproduce(self):
        imgs, caps, owner = mirrored_corpus(12, 5, 3)
        cfg = rt.RetrievalConfig(n_contrastive=3, epochs=3, batch_size=8, seed=4)
        a = rt.train_retrieval((imgs, caps, owner), (imgs, caps, owner), cfg)
        b = rt.train_retrieval((imgs, caps, owner), (imgs, caps, owner), cfg)
        assert a.history == b.history
        assert np.array_equal(a.projection.U.data, b.projection.U.data)
        assert np.array_equal(a.projection.V.data, b.projection.V.data)

    def test_best_epoch_selected(self):
        imgs, caps, owner = mirrored_corpus(12, 5, 3)
        cfg = rt.RetrievalConfig(n_contrastive=3, epochs=5, batch_size=8, seed=4)
        res = rt.train_retrieval((imgs, caps, owner), (imgs, caps, owner), cfg)
        keys = [(h["val_rsum"], -h["loss"]) for h in res.history]
        assert res.best_epoch == 1 + keys.index(max(keys))


class TestFiles:
    @pytest.mark.parametrize("binary", [False, True])
    def test_feature_round_trip(self, tmp_path, rng, binary):
        m = rng.normal(size=(4, 3))
        rt.write_image_features(tmp_path / "f", ["a", "b", "c", "d"], m, binary=binary)
        ids, back = rt.read_image_features(tmp_path / "f")
        assert np.array_equal(back, m)
        assert ids == (["0", "1", "2", "3"] if binary else ["a", "b", "c", "d"])

    def test_bad_row_count(self, tmp_path):
        (tmp_path / "f").write_text("3 2\na 1 2\nb 3 4\n")
        with pytest.raises(rt.RetrievalError, match="header says 3"):
            rt.read_image_features(tmp_path / "f")

    def test_captions_and_splits(self, tmp_path):
        (tmp_path / "c").write_text("a\tthe dog\nb\ta cat\n")
        (tmp_path / "s").write_text("a\ttrain\nb\ttest\n")
        assert rt.read_captions(tmp_path / "c") == [("a", "the dog"), ("b", "a cat")]
        assert rt.read_split_assignment(tmp_path / "s") == {"a": "train", "b": "test"}
        (tmp_path / "s").write_text("a\tholdout\n")
        with pytest.raises(rt.RetrievalError, match=":1:"):
            rt.read_split_assignment(tmp_path / "s")
