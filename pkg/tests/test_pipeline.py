import json
from dataclasses import replace

import numpy as np
import pytest

from metadapt import pipeline as P
from metadapt.autodiff import no_grad
from metadapt.errors import MetAdaptError, PreconditionError
from metadapt.heads import episode_loss
from metadapt.search_space import AlphaTable


@pytest.fixture
def trained(tiny_cfg):
    cfg = tiny_cfg()
    splits = P.load_splits(cfg)
    model = P.pretrain(cfg, splits)
    feats = P.FeatureCache(model.stem, splits)
    return cfg, splits, model, feats


def test_config_json_round_trip_and_validation(tmp_path, tiny_cfg):
    cfg = tiny_cfg()
    path = tmp_path / "c.json"
    path.write_text(cfg.to_json())
    assert P.RunConfig.from_json(path) == cfg
    with pytest.raises(PreconditionError):
        P.RunConfig.from_dict({"bogus": 1})
    with pytest.raises(PreconditionError):
        P.RunConfig(order="third")
    with pytest.raises(PreconditionError):
        P.RunConfig(search_epochs=0)
    assert cfg.structural_hash() == replace(cfg, seed=9, w_lr=0.5).structural_hash()
    assert cfg.structural_hash() != replace(cfg, nodes=4).structural_hash()


def test_full_scale_preset_budgets():
    cfg = P.RunConfig.full_scale()
    assert (cfg.pretrain_epochs, cfg.search_epochs, cfg.episodes_per_epoch, cfg.batch_episodes) == (60, 10, 8000, 4)
    assert cfg.pretrain_milestones == [[20, 0.006], [40, 0.0012], [50, 0.00024]]
    assert (cfg.w_lr, cfg.alpha_lr, cfg.alpha_betas, cfg.alpha_weight_decay) == (0.001, 3e-4, [0.5, 0.99], 1e-3)
    assert (cfg.momentum, cfg.weight_decay, cfg.pretrain_lr) == (0.9, 5e-4, 0.1)


def test_feature_cache_matches_stem(trained):
    cfg, splits, model, feats = trained
    ep = next(P.episodes(splits["val"], cfg, 1, np.random.default_rng(0), flip=True))
    from metadapt.autodiff import Tensor
    from metadapt.stem import stem_forward

    with no_grad():
        direct = stem_forward(Tensor(ep.support_x), model.stem).data
    np.testing.assert_allclose(feats.support("val", ep), direct, atol=1e-5)


def test_search_metrics_rows_and_frozen_stem(trained):
    cfg, splits, model, feats = trained
    stem_sum = model.stem.checksum()
    metrics = P.Metrics(None)
    res = P.search(model, feats, splits, metrics)
    folds = [(r["epoch"], r["fold"]) for r in metrics.rows if r["phase"] == "search"]
    for epoch in range(cfg.search_epochs):
        assert [f for e, f in folds if e == epoch] == ["train_w", "train_alpha", "val"]
    assert len(res.alpha_history) == cfg.search_epochs + 1
    assert not np.array_equal(res.alpha_history[0], res.alpha_history[-1])
    assert 0 <= res.train_accuracy <= 1 and res.gap == res.train_accuracy - res.val_accuracy
    P.train_controllers(model, feats, splits)
    assert model.stem.checksum() == stem_sum


def test_uniform_alpha_stays_uniform(trained):
    cfg, splits, model, feats = trained
    P.search(model, feats, splits, uniform=True)
    assert (model.alpha.as_array() == 0).all()


def test_shared_rng_tag_pairs_searches(trained):
    cfg, splits, model, feats = trained
    sums = []
    for tag, rng_tag in (("x", "pair"), ("y", "pair"), ("z", None)):
        P.search(model, feats, splits, uniform=True, tag=tag, rng_tag=rng_tag)
        sums.append(model.block.checksum())
    assert sums[0] == sums[1] != sums[2]


def test_controller_zero_init_and_frozen_parameters(trained):
    cfg, splits, model, feats = trained
    P.search(model, feats, splits, order="first")
    P.attach_bank(model, np.random.default_rng(0), flip=False)
    model.block.eval()
    for ep in P.episodes(splits["test"], cfg, 5, np.random.default_rng(1)):
        with no_grad():
            a = episode_loss(P.episode_logits(model, feats, "test", ep, use_bank=True, training=False), ep.query_y).item()
            b = episode_loss(P.episode_logits(model, feats, "test", ep, training=False), ep.query_y).item()
        assert abs(a - b) < 1e-6
    block_sum, alpha = model.block.checksum(), model.alpha.as_array().copy()
    curve = P.train_controllers(model, feats, splits)
    assert len(curve) == cfg.controller_epochs + 1
    assert model.block.checksum() == block_sum
    np.testing.assert_array_equal(model.alpha.as_array(), alpha)


def test_eval_report_and_support_size_guard(trained):
    cfg, splits, model, feats = trained
    P.search(model, feats, splits, order="first")
    P.train_controllers(model, feats, splits, flip=False)
    r1 = P.evaluate(model, feats, splits)
    r2 = P.evaluate(model, feats, splits)
    np.testing.assert_array_equal(r1.accuracies, r2.accuracies)
    assert len(r1.accuracies) == cfg.eval_episodes
    assert r1.ci95 == pytest.approx(1.96 * r1.accuracies.std() / np.sqrt(cfg.eval_episodes))
    assert set(r1.as_dict()) == {"accuracy_mean", "ci95", "episodes", "config_hash"}
    with pytest.raises(PreconditionError):
        P.evaluate(model, feats, splits, flip=True)


def test_finetune_restores_weights_per_episode(trained):
    cfg, splits, model, feats = trained
    P.search(model, feats, splits, order="first")
    before = model.block.checksum()
    P.evaluate(model, feats, splits, finetune=True, flip=True, use_bank=False)
    assert model.block.checksum() == before


def test_dump_alpha(trained, tmp_path):
    cfg, splits, model, feats = trained
    P.search(model, feats, splits, order="first")
    P.train_controllers(model, feats, splits)
    P.evaluate(model, feats, splits, dump_alpha=tmp_path / "dump", episodes_count=3)
    files = sorted((tmp_path / "dump").glob("*.csv"))
    assert len(files) == 3
    table = AlphaTable.from_csv(files[0].read_text())
    assert table.nodes == cfg.nodes


def test_transfer_keeps_alpha_bit_identical(trained):
    cfg, splits, model, feats = trained
    rng = np.random.default_rng(3)
    src = AlphaTable.from_array(cfg.nodes, P.op_set(cfg.ops), rng.standard_normal((3, 9)))
    before = src.as_array().copy()
    P.search(model, feats, splits, alpha=src, full_train=True, tag="transfer")
    np.testing.assert_array_equal(model.alpha.as_array(), before)
    np.testing.assert_array_equal(src.as_array(), before)


def test_checkpoint_forward_is_bit_exact(trained, tmp_path):
    cfg, splits, model, feats = trained
    P.search(model, feats, splits, order="first")
    P.train_controllers(model, feats, splits)
    P.save_model(tmp_path / "m.mack", model, "controllers")
    back = P.load_model(tmp_path / "m.mack", cfg, splits["train"].image_shape)
    feats2 = P.FeatureCache(back.stem, splits)
    for ep in P.episodes(splits["test"], cfg, 3, np.random.default_rng(4)):
        P._set_eval(model)
        P._set_eval(back)
        with no_grad():
            a = P.episode_logits(model, feats, "test", ep, use_bank=True, training=False).data
            b = P.episode_logits(back, feats2, "test", ep, use_bank=True, training=False).data
        np.testing.assert_array_equal(a, b)
    with pytest.raises(PreconditionError):
        P.load_model(tmp_path / "m.mack", cfg, splits["train"].image_shape, ("pretrain",))


def test_stochastic_variant_runs_and_test_forward_is_deterministic(tiny_cfg):
    cfg = tiny_cfg(stochastic=True, gumbel_decay=0.9)
    splits = P.load_splits(cfg)
    model = P.pretrain(cfg, splits)
    feats = P.FeatureCache(model.stem, splits)
    P.search(model, feats, splits, order="first")
    assert model.gumbel.temperature == pytest.approx(0.9)
    P.train_controllers(model, feats, splits)
    r1, r2 = P.evaluate(model, feats, splits), P.evaluate(model, feats, splits)
    np.testing.assert_array_equal(r1.accuracies, r2.accuracies)


def test_end_to_end_determinism(tiny_cfg):
    reports = []
    for _ in range(2):
        cfg = tiny_cfg()
        splits = P.load_splits(cfg)
        model = P.pretrain(cfg, splits)
        feats = P.FeatureCache(model.stem, splits)
        P.search(model, feats, splits)
        P.train_controllers(model, feats, splits)
        reports.append(P.evaluate(model, feats, splits).as_dict())
    assert json.dumps(reports[0]) == json.dumps(reports[1])


def test_run_dir_lock(tiny_cfg):
    cfg = tiny_cfg()
    with P.run_dir(cfg) as out:
        with pytest.raises(PreconditionError):
            with P.run_dir(cfg):
                pass
        assert (out / ".lock").exists()
    assert not (out / ".lock").exists()


def test_ablation_table(tiny_cfg):
    cfg = tiny_cfg(search_epochs=1)
    splits = P.load_splits(cfg)
    runs = P.ablate_seed(cfg, splits)
    assert [r.row for r in runs] == list("abcdefgh")
    md, csv_text = P.ablation_table(runs + [replace(r, seed=1) for r in runs])
    lines = md.splitlines()
    assert len([l for l in lines if l.startswith("| ") and l[2] in "abcdefgh"]) == 8
    assert any(l.startswith("f - e:") for l in lines)
    assert len(csv_text.strip().splitlines()) == 9


def test_controller_phase_detects_tampering(trained, monkeypatch):
    cfg, splits, model, feats = trained
    P.search(model, feats, splits, order="first")
    real = P.SGD.step

    def leaky(self, grads):
        real(self, grads)
        model.alpha.tensors()[0].data = model.alpha.tensors()[0].data + 1.0

    monkeypatch.setattr(P.SGD, "step", leaky)
    with pytest.raises(MetAdaptError):
        P.train_controllers(model, feats, splits)
