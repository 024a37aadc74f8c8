import numpy as np
import pytest

from cdum.baselines import MetaLearner, meta_learner_fit
from cdum.checkpoint import load_model, save_model
from cdum.cpm import CpmConfig, CpmModel, cpm_fit, cpm_forward, cpm_loss_and_grads, extract_treatment_views
from cdum.data import OfflineDataset, SynthSpec, generate_synth, split_811
from cdum.encoding import FeatureSchema, fit_normalizer
from cdum.errors import CheckpointError, MissingArmError, TreatmentIndexError
from cdum.gradcheck import mini_cpm
from cdum.nn import affine_forward
from cdum.training import TrainConfig

SMALL = dict(expert_count=2, embedding_dim=4, hidden_dim=8, view_dim=6, tower_hidden_dim=8)


def tiny_model(seed=0, **overrides):
    model, xn, tn, y = mini_cpm(seed, **overrides)
    return model, xn, tn, y


class TestForward:
    def test_zero_extractor_gives_half(self):
        model, xn, tn, _ = tiny_model()
        for name in list(model.params):
            if name.startswith(("gui.", "ind.")):
                model.params[name][:] = 0.0
        _, et_star = model.encode(xn, tn)
        gui, ind = extract_treatment_views(et_star, model)
        assert np.all(gui == 0.5) and np.all(ind == 0.5)

    def test_views_in_open_unit_interval(self):
        model, xn, tn, _ = tiny_model(3)
        gui, ind = model.treatment_views(model.encode(xn, tn)[1])
        for v in (gui, ind):
            assert np.all(v > 0) and np.all(v < 1)

    def test_single_expert_gate_is_one(self):
        schema = FeatureSchema.continuous(3, 2)
        rng = np.random.default_rng(0)
        x = rng.normal(size=(6, 3))
        t = np.array([[0], [1], [2], [0], [1], [2]], dtype=float)
        cfg = CpmConfig(treatment_count=2, expert_count=1, embedding_dim=3, hidden_dim=4, view_dim=3,
                        tower_hidden_dim=4)
        model = CpmModel.init(schema, cfg, fit_normalizer(x, t, schema), t[:3], rng)
        _, cache = model.forward(*model.normalize(x, t))
        np.testing.assert_array_equal(cache["g"], 1.0)
        np.testing.assert_array_equal(cache["mixed"], cache["f"][:, 0, :])

    def test_half_indicator_halves_head_input(self):
        model, xn, tn, _ = tiny_model()
        mixed = model.forward(xn, tn)[1]["mixed"]
        half = np.full((mixed.shape[0], model.config.view_dim), 0.5)
        _, v_off, masked_off, _ = model.tower(1, mixed, None)
        _, v_on, masked_on, _ = model.tower(1, mixed, half)
        np.testing.assert_array_equal(masked_on, 0.5 * masked_off)

    def test_gate_on_simplex(self):
        model, xn, tn, _ = tiny_model(5)
        g = model.forward(xn, tn)[1]["g"]
        np.testing.assert_allclose(g.sum(axis=1), 1.0, atol=1e-6)
        assert np.all(g >= 0)

    def test_bad_treatment_index(self):
        model, xn, tn, _ = tiny_model()
        tn = tn.copy()
        tn[0, 0] = 3
        with pytest.raises(TreatmentIndexError):
            model.forward(xn, tn)

    def test_ablated_model_is_plain_expert_mixture(self):
        model, xn, tn, _ = tiny_model(2, use_indicator=False, use_guidance=False)
        pred, _ = model.forward(xn, tn)
        ex = model.encode(xn, tn)[0]
        f = np.stack([affine_forward(affine_forward(ex, model.layer(f"expert{m}.hidden", "relu")),
                                     model.layer(f"expert{m}.out", "sigmoid")) for m in range(2)], axis=1)
        g = affine_forward(ex, model.layer("gate", "softmax"))
        mixed = np.einsum("nm,nmd->nd", g, f)
        expected = np.empty_like(pred)
        for i, k in enumerate(tn[:, 0].astype(int)):
            a = affine_forward(mixed[i:i + 1], model.layer(f"tower{k}.hidden", "relu"))
            v = affine_forward(a, model.layer(f"tower{k}.view", "sigmoid"))
            expected[i] = affine_forward(v, model.layer(f"tower{k}.head", "none"))[0, 0]
        np.testing.assert_allclose(pred, expected, rtol=1e-13, atol=1e-14)

    def test_zero_heads_predict_bias(self):
        model, xn, tn, _ = tiny_model()
        for k in range(3):
            model.params[f"tower{k}.head.W"][:] = 0.0
            model.params[f"tower{k}.head.b"][:] = 1.25
        x = np.column_stack([np.ones((4, 5)), np.zeros(4)])
        np.testing.assert_array_equal(model.predict_all(x), 1.25)

    def test_predict_all_shape(self):
        model, *_ = tiny_model()
        assert model.predict_all(np.zeros((7, 6))).shape == (7, 3)

    def test_predict_all_agrees_with_own_tower(self):
        model, *_ = tiny_model(4)
        x = np.random.default_rng(0).normal(size=(5, 6))
        x[:, 5] = [0, 1, 2, 0, 1]
        sweep = model.predict_all(x)
        for k in range(3):
            t = np.repeat(model.canonical_treatments[k:k + 1], 5, axis=0)
            np.testing.assert_allclose(model.predict_own(x, t), sweep[:, k], rtol=1e-12)


class TestLoss:
    def as_dataset(self, model, xn, tn, y):
        # the mini model's normalizer is fitted on raw data; invert by using raw arrays directly
        return xn, tn, y

    def test_exclusive_tower_params_have_zero_gradient(self):
        model, xn, tn, y = tiny_model()
        rows = tn[:, 0] == 1
        pred, cache = model.forward(xn[rows], tn[rows])
        grads = model.backward(cache, np.ones(rows.sum()))
        for j in (0, 2):
            for name in model.tower_params(j):
                assert np.all(grads[name] == 0.0)

    def test_perturbing_other_towers_leaves_loss(self):
        model, xn, tn, y = tiny_model(1)
        before, _ = model.forward(xn, tn)
        rng = np.random.default_rng(0)
        arm = tn[:, 0].astype(int)
        for k in range(3):
            saved = {n: model.params[n].copy() for n in model.tower_params(k)}
            for n in saved:
                model.params[n] += rng.normal(size=saved[n].shape)
            after, _ = model.forward(xn, tn)
            np.testing.assert_array_equal(after[arm != k], before[arm != k])
            assert np.all(after[arm == k] != before[arm == k])
            for n, v in saved.items():
                model.params[n][...] = v

    def test_perfect_prediction_is_zero_loss(self, small_rct):
        ds, _, _ = small_rct
        sub = ds.take(np.arange(30))
        cfg = CpmConfig(treatment_count=2, **SMALL)
        model = CpmModel.init(sub.schema, cfg, fit_normalizer(sub.x, sub.t, sub.schema), sub.canonical_treatments,
                              np.random.default_rng(0))
        exact = OfflineDataset(sub.x, sub.t, model.predict_own(sub.x, sub.t), sub.schema, sub.canonical_treatments)
        loss, grads = cpm_loss_and_grads(exact, model)
        assert loss == 0.0
        assert all(np.all(g == 0.0) for g in grads.values())

    def test_linear_branch_single_instance(self, small_rct):
        ds, _, _ = small_rct
        one = ds.take([0])
        cfg = CpmConfig(treatment_count=2, **SMALL)
        model = CpmModel.init(one.schema, cfg, fit_normalizer(ds.x, ds.t, ds.schema), one.canonical_treatments,
                              np.random.default_rng(0))
        pred = cpm_forward(one[0], model)
        shifted = OfflineDataset(one.x, one.t, np.array([pred + 2.0]), one.schema, one.canonical_treatments)
        loss, _ = cpm_loss_and_grads(shifted, model, delta=1.0)
        assert loss == pytest.approx(1.5, abs=1e-12)


class TestFit:
    cfg = TrainConfig(epochs=5, batch_size=256)

    def fit(self, small_rct, seed=0, **kw):
        ds, _, sp = small_rct
        return cpm_fit(ds.take(sp.train), ds.take(sp.validation), CpmConfig(treatment_count=2, **SMALL, **kw),
                       self.cfg, seed)

    def test_validation_loss_improves(self, small_rct):
        _, hist = self.fit(small_rct)
        assert hist.val_loss[-1] < hist.val_loss[0]
        assert len(hist.val_loss) == self.cfg.epochs + 1

    def test_deterministic(self, small_rct):
        a, _ = self.fit(small_rct, seed=3)
        b, _ = self.fit(small_rct, seed=3)
        for name in a.params:
            np.testing.assert_array_equal(a.params[name], b.params[name])

    def test_trained_guidance_differs_between_treatments(self, small_rct):
        model, _ = self.fit(small_rct)
        tn = model.normalizer.apply_t(model.canonical_treatments)
        from cdum.encoding import embed_block
        et = embed_block(tn, model.schema.treatment, model.t_tables).mean(axis=1)
        gui, _ = model.treatment_views(et)
        assert not np.allclose(gui[1], gui[2])

    def test_uplift_sign_agreement(self):
        ds, truth = generate_synth(SynthSpec(user_count=20000, effect_scale=0.6, seed=5))
        sp = split_811(len(ds), 5)
        model, _ = cpm_fit(ds.take(sp.train), ds.take(sp.validation), CpmConfig(treatment_count=2),
                           TrainConfig(epochs=15, batch_size=512), seed=0)
        scores = model.predict_all(ds.x[sp.test])
        uplift = scores[:, 1:] - scores[:, :1]
        agree = np.mean(np.sign(uplift) == np.sign(truth.tau[sp.test]))
        assert agree >= 0.8


class TestBaselines:
    def constant_arms(self):
        rng = np.random.default_rng(0)
        n = 900
        schema = FeatureSchema.continuous(3, 2)
        arm = np.arange(n) % 3
        x = rng.normal(size=(n, 3))
        y = np.array([1.0, 2.5, -0.5])[arm]
        canon = np.arange(3, dtype=float)[:, None]
        return OfflineDataset(x, arm[:, None].astype(float), y, schema, canon)

    def test_t_learner_recovers_constants(self):
        ds = self.constant_arms()
        sp = split_811(len(ds), 0)
        model, hists = meta_learner_fit(ds.take(sp.train), ds.take(sp.validation), "T",
                                        CpmConfig(treatment_count=2, **SMALL), TrainConfig(epochs=30, batch_size=64))
        assert len(hists) == 3
        pred = model.predict_all(ds.x[sp.test])
        np.testing.assert_allclose(pred.mean(axis=0), [1.0, 2.5, -0.5], atol=0.1)

    def test_s_learner_null_effect_centered(self):
        ds, _ = generate_synth(SynthSpec(user_count=3000, constant_effects=[0.0, 0.0], seed=2))
        sp = split_811(len(ds), 2)
        model, _ = meta_learner_fit(ds.take(sp.train), ds.take(sp.validation), "S",
                                    CpmConfig(treatment_count=2, **SMALL), TrainConfig(epochs=10, batch_size=256))
        pred = model.predict_all(ds.x[sp.test])
        assert np.abs((pred[:, 1:] - pred[:, :1]).mean(axis=0)).max() < 0.2

    @pytest.mark.parametrize("variant", ["S", "T"])
    def test_deterministic(self, small_rct, variant):
        ds, _, sp = small_rct
        runs = [meta_learner_fit(ds.take(sp.train), ds.take(sp.validation), variant,
                                 CpmConfig(treatment_count=2, **SMALL), TrainConfig(epochs=2, batch_size=512), 7)[0]
                for _ in range(2)]
        for name in runs[0].params:
            np.testing.assert_array_equal(runs[0].params[name], runs[1].params[name])

    def test_missing_arm_named(self):
        ds = self.constant_arms()
        keep = np.flatnonzero(ds.treatment != 2)
        with pytest.raises(MissingArmError, match="arm 2"):
            meta_learner_fit(ds.take(keep[:500]), ds.take(keep[500:]), "T", CpmConfig(treatment_count=2, **SMALL))


class TestCheckpoint:
    def test_round_trip(self, tmp_path):
        model, *_ = tiny_model()
        path = tmp_path / "cpm.json"
        save_model(model, path)
        loaded = load_model(path, "cpm")
        x = np.random.default_rng(0).normal(size=(4, 6))
        x[:, 5] = [0, 1, 2, 1]
        np.testing.assert_array_equal(loaded.predict_all(x), model.predict_all(x))

    def test_meta_learner_round_trip(self, tmp_path):
        model, *_ = tiny_model()
        ml = MetaLearner.init("T", model.schema, model.config, model.normalizer, model.canonical_treatments,
                              np.random.default_rng(0))
        save_model(ml, tmp_path / "t.json")
        loaded = load_model(tmp_path / "t.json")
        assert loaded.kind == "t_learner"
        x = np.zeros((2, 6))
        np.testing.assert_array_equal(loaded.predict_all(x), ml.predict_all(x))

    def test_kind_mismatch(self, tmp_path):
        model, *_ = tiny_model()
        save_model(model, tmp_path / "cpm.json")
        with pytest.raises(CheckpointError, match="fic"):
            load_model(tmp_path / "cpm.json", "fic")

    def test_corrupt_shape(self, tmp_path):
        import json
        model, *_ = tiny_model()
        save_model(model, tmp_path / "cpm.json")
        doc = json.loads((tmp_path / "cpm.json").read_text())
        doc["params"]["gate.W"]["shape"] = [1, doc["params"]["gate.W"]["shape"][0] * doc["params"]["gate.W"]["shape"][1]]
        (tmp_path / "bad.json").write_text(json.dumps(doc))
        with pytest.raises(CheckpointError, match="gate.W"):
            load_model(tmp_path / "bad.json")
