"""Classification metrics versus brute-force references, probe plumbing and
the ablation result table."""

import os

import numpy as np
import pytest

from fgmae import data as D
from fgmae import evaluate as E
from fgmae import features as F
from fgmae import model as M
from fgmae import pretrain as P
from fgmae.rng import Rng

from oracles import (f1_reference, map_reference, miou_reference,
                     oa_aa_reference)


class TestMapMetric:
    def test_hand_example(self):
        scores = np.array([[0.9], [0.4], [0.2]])
        labels = np.array([[1], [0], [1]])
        mAP, per = E.metric_map(scores, labels)
        np.testing.assert_allclose(mAP, (1.0 + 2.0 / 3.0) / 2.0)

    def test_perfect_ranking(self):
        scores = np.array([[0.9], [0.8], [0.1]])
        labels = np.array([[1], [1], [0]])
        assert E.metric_map(scores, labels)[0] == 1.0

    def test_single_positive_at_bottom(self):
        n = 7
        scores = np.arange(n, dtype=float)[::-1].reshape(-1, 1)
        labels = np.zeros((n, 1), dtype=int)
        labels[-1, 0] = 1
        np.testing.assert_allclose(E.metric_map(scores, labels)[0], 1.0 / n)

    def test_classes_without_positives_skipped(self):
        scores = np.random.default_rng(0).random((6, 3))
        labels = np.zeros((6, 3), dtype=int)
        labels[:, 0] = [1, 0, 1, 0, 0, 0]
        mAP, per = E.metric_map(scores, labels)
        assert per[1] is None and per[2] is None
        np.testing.assert_allclose(
            mAP, map_reference(scores[:, :1], labels[:, :1]))

    def test_all_negative_rejected(self):
        with pytest.raises(ValueError):
            E.metric_map(np.zeros((3, 2)), np.zeros((3, 2), dtype=int))

    def test_matches_bruteforce_random(self):
        gen = np.random.default_rng(1)
        for _ in range(30):
            n, c = int(gen.integers(2, 12)), int(gen.integers(1, 4))
            scores = gen.random((n, c))
            labels = gen.integers(0, 2, (n, c))
            if labels.sum(axis=0).min() == 0:
                labels[0] = 1
            np.testing.assert_allclose(E.metric_map(scores, labels)[0],
                                       map_reference(scores, labels))

    def test_tie_break_stable(self):
        scores = np.array([[0.5], [0.5], [0.5]])
        labels = np.array([[0], [1], [0]])
        # ties resolved by ascending index: positive lands at rank 2
        np.testing.assert_allclose(E.metric_map(scores, labels)[0], 0.5)


class TestF1:
    def test_matches_bruteforce_random(self):
        gen = np.random.default_rng(2)
        for _ in range(30):
            n, c = int(gen.integers(2, 15)), int(gen.integers(1, 5))
            pred = gen.integers(0, 2, (n, c))
            labels = gen.integers(0, 2, (n, c))
            f1, _ = E.metric_f1(pred, labels)
            np.testing.assert_allclose(f1, f1_reference(pred, labels))

    def test_perfect_prediction(self):
        labels = np.array([[1, 0], [0, 1]])
        assert E.metric_f1(labels, labels)[0] == 1.0

    def test_empty_class_zero(self):
        pred = np.zeros((4, 1), dtype=int)
        labels = np.zeros((4, 1), dtype=int)
        assert E.metric_f1(pred, labels)[0] == 0.0


class TestOaAa:
    def test_matches_bruteforce_random(self):
        gen = np.random.default_rng(3)
        for _ in range(30):
            n = int(gen.integers(2, 20))
            k = int(gen.integers(2, 5))
            labels = gen.integers(0, k, n)
            pred = gen.integers(0, k, n)
            oa, aa = E.metric_oa_aa(pred, labels)
            oa_r, aa_r = oa_aa_reference(list(pred), list(labels))
            np.testing.assert_allclose(oa, oa_r)
            np.testing.assert_allclose(aa, aa_r)

    def test_imbalanced_aa_differs_from_oa(self):
        labels = np.array([0, 0, 0, 0, 1])
        pred = np.array([0, 0, 0, 0, 0])
        oa, aa = E.metric_oa_aa(pred, labels)
        np.testing.assert_allclose(oa, 0.8)
        np.testing.assert_allclose(aa, 0.5)


class TestMiou:
    def test_hand_example(self):
        pred = np.array([[0, 0], [1, 1]])
        label = np.array([[0, 1], [1, 1]])
        oa, aa, miou = E.metric_miou(pred, label, 2)
        np.testing.assert_allclose(miou, 7.0 / 12.0)

    def test_ignore_index(self):
        pred = np.array([0, 1, 1, 0])
        label = np.array([0, 1, 255, 255])
        oa, aa, miou = E.metric_miou(pred, label, 2, ignore_index=255)
        assert oa == 1.0 and miou == 1.0

    def test_matches_bruteforce_random(self):
        gen = np.random.default_rng(4)
        for _ in range(30):
            k = int(gen.integers(2, 5))
            pred = gen.integers(0, k, (6, 6))
            label = gen.integers(0, k, (6, 6))
            ours = E.metric_miou(pred, label, k)
            ref = miou_reference(pred, label, k)
            np.testing.assert_allclose(ours, ref)


class TestProbePlumbing:
    def test_split_holds_out_every_nth_location(self):
        entries = [D.SceneEntry(f"loc{i:02d}", s, "SAR", f"{i}_{s}.fgmr", "0")
                   for i in range(8) for s in range(2)]
        train, held = E._split_entries(entries, 4)
        train_locs = {e.location_id for e in train}
        held_locs = {e.location_id for e in held}
        assert held_locs == {"loc00", "loc04"}
        assert not train_locs & held_locs

    def test_layer_decay_scales(self):
        cfg = M.ModelConfig(image_size=32, patch_size=8, in_channels=2,
                            enc_width=32, enc_depth=3, enc_heads=4,
                            out_dims=16)
        scales = E.layer_decay_scales(cfg, 0.5)
        # embedding below block 0, head at 1.0
        assert scales["embed.w"] == 0.5 ** 4
        assert scales["enc.0.mlp1.w"] == 0.5 ** 3
        assert scales["enc.2.mlp1.w"] == 0.5 ** 1
        assert scales.get("head.w", 1.0) == 1.0

    def test_params_digest_sensitivity(self):
        cfg = M.ModelConfig(image_size=16, patch_size=8, in_channels=2,
                            enc_width=32, enc_depth=1, enc_heads=4,
                            out_dims=8)
        m1 = M.FgMae(cfg, Rng(0).child("init").at(0))
        m2 = M.FgMae(cfg, Rng(0).child("init").at(0))
        assert E.params_digest(m1.params) == E.params_digest(m2.params)
        m2.params["embed.b"].data[0] += 1e-6
        assert E.params_digest(m1.params) != E.params_digest(m2.params)

    def test_probe_config_validation(self):
        with pytest.raises(ValueError):
            E.ProbeConfig(task="regression")


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    out = str(tmp_path_factory.mktemp("probe") / "data")
    manifest = D.synthesize_dataset(out, "SAR", n_locations=6, seed=5,
                                    looks=1, size=32)
    return manifest, out


class TestProbeTraining:

    def _model(self):
        cfg = M.ModelConfig(image_size=32, patch_size=8, in_channels=2,
                            enc_width=32, enc_depth=1, enc_heads=4,
                            dec_width=32, dec_depth=1, dec_heads=4,
                            mask_ratio=0.7, out_dims=16)
        return M.FgMae(cfg, Rng(3).child("init").at(0))

    def test_linear_probe_runs_and_freezes_encoder(self, dataset):
        manifest, data_dir = dataset
        entries = D.read_manifest(manifest)
        model = self._model()
        before = E.params_digest(model.params)
        pcfg = E.ProbeConfig(task="singlelabel", epochs=2, batch_size=4,
                             lr=0.05, seed=0)
        report = E.linear_probe_train(model, entries, data_dir, pcfg)
        assert E.params_digest(model.params) == before
        assert 0.0 <= report["OA"] <= 1.0 and 0.0 <= report["AA"] <= 1.0

    def test_fine_tune_updates_encoder(self, dataset):
        manifest, data_dir = dataset
        entries = D.read_manifest(manifest)
        model = self._model()
        before = E.params_digest(model.params)
        pcfg = E.ProbeConfig(task="singlelabel", epochs=1, batch_size=4,
                             optimizer="adamw", lr=1e-3, layer_decay=0.75,
                             seed=0)
        report = E.fine_tune(model, entries, data_dir, pcfg)
        assert E.params_digest(model.params) != before
        assert 0.0 <= report["OA"] <= 1.0

    def test_probe_deterministic(self, dataset):
        manifest, data_dir = dataset
        entries = D.read_manifest(manifest)
        pcfg = E.ProbeConfig(task="singlelabel", epochs=2, batch_size=4,
                             lr=0.05, seed=0)
        r1 = E.linear_probe_train(self._model(), entries, data_dir, pcfg)
        r2 = E.linear_probe_train(self._model(), entries, data_dir, pcfg)
        assert r1["OA"] == r2["OA"] and r1["AA"] == r2["AA"]


class TestAblationTable:
    def test_requires_two_specs(self):
        cfg = P.PretrainConfig()
        with pytest.raises(ValueError):
            E.feature_ablation_study(cfg, [F.FeatureSpec("raw")], [0],
                                     "m.csv", "/tmp", E.ProbeConfig())

    def test_csv_writer(self, tmp_path):
        rows = [("hog", 0, "OA", 0.5), ("hog", "mean", "OA", 0.5)]
        p = str(tmp_path / "ablation.csv")
        E.write_ablation_csv(p, rows)
        lines = open(p).read().splitlines()
        assert lines[0] == "spec,seed,metric,value"
        assert lines[1] == "hog,0,OA,0.5"
