"""The three training phases, evaluation, transfer and the ablation matrix.

The stem is frozen after pretraining, so every later phase works on cached
stem features (computed once per split, plus their mirrored versions).
Search, controller training and evaluation all run one episode per block
forward so batch-norm statistics are always per episode.
"""
from __future__ import annotations

import contextlib
import csv
import hashlib
import json
import logging
import os
import zlib
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Callable, Iterator, Sequence

import numpy as np

from metadapt import bilevel
from metadapt.autodiff import Tensor, concat, grad, no_grad, softmax
from metadapt.checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from metadapt.controllers import ControllerBank, adapted_block_forward, canonical_order
from metadapt.data import Dataset, Episode, FoldSplit, SynthSpec, hflip, hflip_augment, load_dataset, sample_episode, synth_dataset
from metadapt.errors import MetAdaptError, PreconditionError
from metadapt.gumbel import GumbelConfig, GumbelSampler, test_time_select
from metadapt.heads import HeadConfig, accuracy, embed, episode_loss, head_logits
from metadapt.nn import frozen_stats, substitute
from metadapt.optim import SGD, Adam, CosineSchedule, StepSchedule
from metadapt.search_space import AdaptiveBlock, AlphaTable, OpKind, block_forward, export_dot, op_set
from metadapt.stem import PlainBlock, Stem, StemConfig, stem_forward

log = logging.getLogger(__name__)

METRICS_HEADER = ["epoch", "phase", "fold", "loss", "accuracy", "eta", "mu"]


@dataclass
class RunConfig:
    """Everything a run depends on. JSON config files use these field names."""

    # data
    dataset: dict = field(default_factory=lambda: asdict(SynthSpec()))
    dataset_seed: int = 1234
    dataset_path: str | None = None
    n_way: int = 5
    k_shot: int = 1
    q_query: int = 6
    # model
    stem_channels: list = field(default_factory=lambda: [8, 8])
    nodes: int = 4
    ops: str = "full"
    d_bottleneck: int | None = None
    head: str = "ridge"
    ridge_lambda: float = 1.0
    head_tau: float | None = None
    # budgets
    pretrain_epochs: int = 6
    search_epochs: int = 4
    controller_epochs: int = 1
    episodes_per_epoch: int = 200
    controller_episodes: int = 400
    batch_episodes: int = 4
    val_episodes: int = 100
    gap_episodes: int = 200
    eval_episodes: int = 1000
    # optimisation
    pretrain_lr: float = 0.1
    pretrain_milestones: list = field(default_factory=lambda: [[2, 0.006], [4, 0.0012], [5, 0.00024]])
    momentum: float = 0.9
    weight_decay: float = 5e-4
    w_lr: float = 0.001
    controller_lr: float = 0.001
    alpha_lr: float = 3e-4
    alpha_betas: list = field(default_factory=lambda: [0.5, 0.99])
    alpha_weight_decay: float = 1e-3
    alpha_eta_min: float = 3e-5
    order: str = "second"
    second_order_mode: str = "finite-diff"
    uniform_alpha: bool = False
    fold_ratio: float = 0.5
    # stochastic variant
    stochastic: bool = False
    gumbel_temp: float = 1.0
    gumbel_decay: float = 1.0
    gumbel_floor: float = 0.1
    # test time
    flip: bool = False
    finetune: bool = False
    finetune_iters: int = 10
    finetune_lr: float = 0.01
    # run
    seed: int = 0
    output_dir: str = "runs/default"

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        budgets = (
            "n_way", "k_shot", "q_query", "nodes", "pretrain_epochs", "search_epochs", "controller_epochs",
            "episodes_per_epoch", "controller_episodes", "batch_episodes", "val_episodes", "gap_episodes",
            "eval_episodes", "finetune_iters",
        )
        for name in budgets:
            if int(getattr(self, name)) < 1:
                raise PreconditionError(f"{name} must be >= 1")
        if self.order not in ("first", "second"):
            raise PreconditionError(f"order must be 'first' or 'second', got {self.order!r}")
        if self.second_order_mode not in ("exact", "finite-diff"):
            raise PreconditionError(f"unknown second_order_mode {self.second_order_mode!r}")
        op_set(self.ops)
        HeadConfig(self.head, self.ridge_lambda, self.head_tau)
        GumbelConfig(self.gumbel_temp, self.gumbel_decay, self.gumbel_floor)

    # -- presets -------------------------------------------------------
    @classmethod
    def full_scale(cls, **overrides) -> "RunConfig":
        """Full-scale phase budgets; learning rates are the same as the desk defaults."""
        base = dict(
            pretrain_epochs=60,
            pretrain_milestones=[[20, 0.006], [40, 0.0012], [50, 0.00024]],
            search_epochs=10,
            controller_epochs=1,
            episodes_per_epoch=8000,
            controller_episodes=8000,
        )
        base.update(overrides)
        return cls(**base)

    # -- serialisation -------------------------------------------------
    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise PreconditionError(f"unknown config keys: {unknown}")
        return cls(**d)

    @classmethod
    def from_json(cls, path) -> "RunConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def structural_hash(self) -> str:
        """Hash of the fields that fix parameter shapes; checkpoints are keyed by it."""
        spec = self.dataset if self.dataset_path is None else {}
        keys = {
            "n_way": self.n_way,
            "k_shot": self.k_shot,
            "stem_channels": list(self.stem_channels),
            "nodes": self.nodes,
            "ops": self.ops,
            "d_bottleneck": self.d_bottleneck,
            "flip": self.flip,
            "image": [spec.get("channels", 3), spec.get("height", 16), spec.get("width", 16)],
        }
        return hashlib.sha256(json.dumps(keys, sort_keys=True).encode()).hexdigest()

    @property
    def head_config(self) -> HeadConfig:
        return HeadConfig(self.head, self.ridge_lambda, self.head_tau)

    @property
    def gumbel_config(self) -> GumbelConfig:
        return GumbelConfig(self.gumbel_temp, self.gumbel_decay, self.gumbel_floor)


def phase_rng(seed: int, tag: str) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, zlib.crc32(tag.encode())]))


# ----------------------------------------------------------------------
# data and features
# ----------------------------------------------------------------------


def load_splits(cfg: RunConfig) -> dict[str, Dataset]:
    if cfg.dataset_path:
        root = Path(cfg.dataset_path)
        return {s: load_dataset(root / f"{s}.fsds", name=root.name) for s in ("train", "val", "test")}
    return synth_dataset(SynthSpec(**cfg.dataset), cfg.dataset_seed)


class FeatureCache:
    """Stem features of every image in each split, plain and mirrored."""

    def __init__(self, stem: Stem, splits: dict[str, Dataset], chunk: int = 256):
        self.feats: dict[tuple[str, bool], np.ndarray] = {}
        stem.eval()
        with no_grad():
            for name, ds in splits.items():
                imgs = ds.flat_images()
                for flipped in (False, True):
                    src = hflip(imgs) if flipped else imgs
                    parts = [stem_forward(Tensor(src[i : i + chunk]), stem).data for i in range(0, len(src), chunk)]
                    self.feats[(name, flipped)] = np.concatenate(parts)

    def support(self, split: str, ep: Episode) -> np.ndarray:
        plain = self.feats[(split, False)][ep.support_ids]
        mirrored = self.feats[(split, True)][ep.support_ids]
        return np.where(ep.support_flipped[:, None, None, None], mirrored, plain)

    def query(self, split: str, ep: Episode) -> np.ndarray:
        return self.feats[(split, False)][ep.query_ids]


def canonical(ep: Episode) -> Episode:
    order = canonical_order(ep.support_y)
    return replace(
        ep,
        support_x=ep.support_x[order],
        support_y=ep.support_y[order],
        support_ids=ep.support_ids[order],
        support_flipped=ep.support_flipped[order],
    )


def episodes(ds: Dataset, cfg: RunConfig, count: int, rng, pool=None, flip: bool = False) -> Iterator[Episode]:
    for _ in range(count):
        ep = sample_episode(ds, cfg.n_way, cfg.k_shot, cfg.q_query, rng, pool)
        yield canonical(hflip_augment(ep) if flip else ep)


def batched(items: Sequence, size: int) -> list[list]:
    return [list(items[i : i + size]) for i in range(0, len(items), size)]


# ----------------------------------------------------------------------
# model
# ----------------------------------------------------------------------


@dataclass
class Model:
    cfg: RunConfig
    stem: Stem
    plain: PlainBlock
    block: AdaptiveBlock | None = None
    bank: ControllerBank | None = None
    gumbel: GumbelSampler | None = None

    @property
    def alpha(self) -> AlphaTable:
        return self.block.alpha_hat

    def arrays(self) -> dict[str, np.ndarray]:
        out = {f"stem/{k}": v for k, v in self.stem.state_dict().items()}
        out.update({f"plain/{k}": v for k, v in self.plain.state_dict().items()})
        if self.block is not None:
            out.update({f"block/{k}": v for k, v in self.block.state_dict().items()})
            out["alpha/logits"] = self.alpha.as_array()
        if self.bank is not None:
            out.update({f"bank/{k}": v for k, v in self.bank.state_dict().items()})
        return out


def new_model(cfg: RunConfig, image_shape, rng: np.random.Generator) -> Model:
    c, h, w = image_shape
    if h != w:
        raise PreconditionError("square images are required")
    stem = Stem(StemConfig(c, tuple(cfg.stem_channels), h), rng)
    return Model(cfg, stem, PlainBlock(stem.cfg.out_channels, rng))


def attach_block(model: Model, rng: np.random.Generator, ops: str | None = None) -> AdaptiveBlock:
    cfg = model.cfg
    model.block = AdaptiveBlock(model.stem.cfg.out_channels, cfg.nodes, op_set(ops or cfg.ops), rng)
    if cfg.stochastic:
        model.gumbel = GumbelSampler(cfg.gumbel_config, rng)
    return model.block


def attach_bank(model: Model, rng: np.random.Generator, flip: bool) -> ControllerBank:
    s = model.cfg.n_way * model.cfg.k_shot * (2 if flip else 1)
    model.bank = ControllerBank(model.block, s, model.cfg.d_bottleneck, rng)
    return model.bank


def model_from_checkpoint(cfg: RunConfig, ck: Checkpoint, image_shape) -> Model:
    model = new_model(cfg, image_shape, np.random.default_rng(0))
    model.stem.load_state_dict(ck.group("stem"))
    model.plain.load_state_dict(ck.group("plain"))
    if "alpha/logits" in ck.arrays:
        block = AdaptiveBlock(model.stem.cfg.out_channels, cfg.nodes, [OpKind.from_label(o) for o in ck.meta["ops"]])
        block.load_state_dict(ck.group("block"))
        block.alpha_hat = AlphaTable.from_array(cfg.nodes, block.ops, ck.arrays["alpha/logits"], requires_grad=True)
        model.block = block
        if cfg.stochastic:
            model.gumbel = GumbelSampler(cfg.gumbel_config, np.random.default_rng(0))
    bank_state = ck.group("bank")
    if bank_state:
        flip = bool(ck.meta.get("bank_flip", False))
        attach_bank(model, np.random.default_rng(0), flip)
        model.bank.load_state_dict(bank_state)
    model.stem.eval()
    return model


# ----------------------------------------------------------------------
# forward passes
# ----------------------------------------------------------------------


def _test_weights(table: AlphaTable) -> dict:
    return {e: Tensor(test_time_select(softmax(t).data)) for e, t in table.logits.items()}


def episode_logits(
    model: Model,
    feats: FeatureCache,
    split: str,
    ep: Episode,
    *,
    use_plain: bool = False,
    use_bank: bool = False,
    alpha: AlphaTable | None = None,
    training: bool = True,
) -> Tensor:
    """Query logits of one episode. ``training`` selects Gumbel sampling over argmax selection."""
    xs = Tensor(feats.support(split, ep))
    xq = Tensor(feats.query(split, ep))
    s = xs.shape[0]
    if use_plain:
        out = model.plain(concat([xs, xq], axis=0))
    else:
        alpha = model.alpha if alpha is None else alpha
        weights_fn = None
        if model.gumbel is not None:
            weights_fn = model.gumbel.edge_weights if training else _test_weights
        if use_bank:
            out, _ = adapted_block_forward(xs, xq, model.block, model.bank, alpha, weights_fn)
        else:
            weights = None if weights_fn is None else weights_fn(alpha)
            out = block_forward(concat([xs, xq], axis=0), model.block, alpha, edge_weights=weights)
    emb = embed(out)
    return head_logits(model.cfg.head_config, emb[:s], ep.support_y, emb[s:], ep.n_way)


class SearchProblem(bilevel.BilevelProblem):
    def __init__(self, model: Model, feats: FeatureCache):
        self.model = model
        self.feats = feats
        self.w_params = model.block.parameters()
        self.alpha_params = model.alpha.tensors()
        self.names = [n for n, _ in model.block.named_parameters()]
        self.last_accuracy = float("nan")

    def loss(self, batch: list[Episode], update_stats: bool = False):
        model = self.model

        def fn(w, alpha):
            table = AlphaTable(model.alpha.nodes, model.alpha.ops, dict(zip(model.alpha.edges, alpha)))
            stats = contextlib.nullcontext() if update_stats else frozen_stats(model.block)
            total, accs = None, []
            with substitute(model.block, dict(zip(self.names, w))), stats:
                for ep in batch:
                    logits = episode_logits(model, self.feats, "train", ep, alpha=table)
                    l = episode_loss(logits, ep.query_y)
                    total = l if total is None else total + l
                    accs.append(accuracy(logits, ep.query_y))
            self.last_accuracy = float(np.mean(accs))
            return total * (1.0 / len(batch))

        return fn

    def before_step(self) -> None:
        if self.model.gumbel is not None:
            self.model.gumbel.resample(self.model.alpha)


# ----------------------------------------------------------------------
# metrics
# ----------------------------------------------------------------------


class Metrics:
    def __init__(self, path: Path | None):
        self.path = path
        self.rows: list[dict] = []

    def add(self, epoch, phase, fold, loss=float("nan"), acc=float("nan"), eta=float("nan"), mu=float("nan")):
        row = dict(epoch=epoch, phase=phase, fold=fold, loss=loss, accuracy=acc, eta=eta, mu=mu)
        self.rows.append(row)
        if self.path is None:
            return
        new = not self.path.exists()
        with self.path.open("a", newline="") as f:
            w = csv.DictWriter(f, fieldnames=METRICS_HEADER)
            if new:
                w.writeheader()
            w.writerow({k: (f"{v:.6g}" if isinstance(v, float) else v) for k, v in row.items()})


# ----------------------------------------------------------------------
# phases
# ----------------------------------------------------------------------


def evaluate_accuracy(
    model: Model, feats: FeatureCache, split: str, ds: Dataset, count: int, rng, *, pool=None, flip: bool = False, **kw
) -> float:
    was = model.block.training if model.block is not None else None
    _set_eval(model)
    accs = []
    with no_grad():
        for ep in episodes(ds, model.cfg, count, rng, pool, flip):
            accs.append(accuracy(episode_logits(model, feats, split, ep, training=False, **kw), ep.query_y))
    if was:
        model.block.train()
    return float(np.mean(accs))


def _set_eval(model: Model) -> None:
    model.stem.eval()
    model.plain.eval()
    if model.block is not None:
        model.block.eval()


def pretrain(cfg: RunConfig, splits: dict[str, Dataset], metrics: Metrics | None = None) -> Model:
    """Episodic training of stem + plain residual block + head."""
    rng = phase_rng(cfg.seed, "pretrain")
    model = new_model(cfg, splits["train"].image_shape, phase_rng(cfg.seed, "init"))
    params = model.stem.parameters() + model.plain.parameters()
    opt = SGD(params, cfg.pretrain_lr, cfg.momentum, cfg.weight_decay)
    sched = StepSchedule(cfg.pretrain_lr, cfg.pretrain_milestones)
    head = cfg.head_config
    train = splits["train"]
    val_rng_tag = "pretrain-val"
    for epoch in range(cfg.pretrain_epochs):
        opt.lr = sched(epoch)
        model.stem.train()
        model.plain.train()
        losses, accs = [], []
        eps = list(episodes(train, cfg, cfg.episodes_per_epoch, rng))
        for batch in batched(eps, cfg.batch_episodes):
            total = None
            for ep in batch:
                x = Tensor(np.concatenate([ep.support_x, ep.query_x]))
                emb = embed(model.plain(stem_forward(x, model.stem)))
                s = ep.support_size
                logits = head_logits(head, emb[:s], ep.support_y, emb[s:], ep.n_way)
                l = episode_loss(logits, ep.query_y)
                total = l if total is None else total + l
                accs.append(accuracy(logits, ep.query_y))
            total = total * (1.0 / len(batch))
            opt.step(grad(total, params))
            losses.append(float(total.item()))
        val = _pretrain_val_accuracy(model, splits["val"], cfg, phase_rng(cfg.seed, val_rng_tag))
        if metrics is not None:
            metrics.add(epoch, "pretrain", "train", float(np.mean(losses)), float(np.mean(accs)), mu=opt.lr)
            metrics.add(epoch, "pretrain", "val", acc=val, mu=opt.lr)
    model.stem.eval()
    model.plain.eval()
    return model


def _pretrain_val_accuracy(model: Model, ds: Dataset, cfg: RunConfig, rng) -> float:
    model.stem.eval()
    model.plain.eval()
    accs = []
    with no_grad():
        for ep in episodes(ds, cfg, cfg.val_episodes, rng):
            x = Tensor(np.concatenate([ep.support_x, ep.query_x]))
            emb = embed(model.plain(stem_forward(x, model.stem)))
            s = ep.support_size
            logits = head_logits(cfg.head_config, emb[:s], ep.support_y, emb[s:], ep.n_way)
            accs.append(accuracy(logits, ep.query_y))
    return float(np.mean(accs))


@dataclass
class SearchResult:
    train_accuracy: float
    val_accuracy: float
    alpha_history: list[np.ndarray]

    @property
    def gap(self) -> float:
        return self.train_accuracy - self.val_accuracy


def search(
    model: Model,
    feats: FeatureCache,
    splits: dict[str, Dataset],
    metrics: Metrics | None = None,
    *,
    ops: str | None = None,
    order: str | None = None,
    uniform: bool | None = None,
    alpha: AlphaTable | None = None,
    full_train: bool = False,
    tag: str = "search",
    rng_tag: str | None = None,
    on_epoch: Callable[[int, Model], None] | None = None,
) -> SearchResult:
    """Bi-level search of a fresh block on top of the frozen stem.

    ``alpha`` fixes the coefficients to a given table (transfer); ``uniform``
    keeps them at their zero initialisation. ``full_train`` trains w on the
    whole training split instead of its w fold (used when alpha is fixed).
    Searches with the same ``rng_tag`` (default: ``tag``) start from the same
    block weights and see the same episodes.
    """
    cfg = model.cfg
    order = cfg.order if order is None else order
    uniform = cfg.uniform_alpha if uniform is None else uniform
    rng_tag = tag if rng_tag is None else rng_tag
    rng = phase_rng(cfg.seed, rng_tag)
    attach_block(model, phase_rng(cfg.seed, rng_tag + "-init"), ops)
    if alpha is not None:
        model.block.alpha_hat = alpha.copy(requires_grad=False)
    frozen_alpha = uniform or alpha is not None
    model.block.train()
    train = splits["train"]
    folds = FoldSplit.make(train, cfg.seed, cfg.fold_ratio)
    ids_w, ids_a = folds.ids(train, "w"), folds.ids(train, "alpha")
    problem = SearchProblem(model, feats)
    w_opt = SGD(problem.w_params, cfg.w_lr, cfg.momentum, cfg.weight_decay)
    a_opt = None
    if not frozen_alpha:
        a_opt = Adam(problem.alpha_params, cfg.alpha_lr, cfg.alpha_betas, weight_decay=cfg.alpha_weight_decay)
    steps = max(1, cfg.episodes_per_epoch // cfg.batch_episodes)
    cosine = CosineSchedule(cfg.alpha_lr, cfg.search_epochs * steps, cfg.alpha_eta_min)
    history = [model.alpha.as_array()]
    pool_w = None if full_train else folds.pool_w
    for epoch in range(cfg.search_epochs):
        if model.gumbel is not None:
            model.gumbel.set_epoch(epoch)
        n = steps * cfg.batch_episodes
        w_batches = batched(list(episodes(train, cfg, n, rng, pool_w)), cfg.batch_episodes)
        a_batches = batched(list(episodes(train, cfg, n, rng, folds.pool_alpha)), cfg.batch_episodes)

        def on_alpha_step(k, epoch=epoch):
            a_opt.lr = cosine(epoch * steps + k)

        stats = bilevel.search_epoch(
            problem,
            w_batches,
            a_batches if a_opt is not None else [None] * len(w_batches),
            w_opt,
            a_opt,
            order=order,
            mode=cfg.second_order_mode,
            fold_ids=None if full_train else (ids_w, ids_a),
            batch_ids=lambda b: np.concatenate([ep.sample_ids() for ep in b]) if b else [],
            on_alpha_step=on_alpha_step if a_opt is not None else None,
        )
        history.append(model.alpha.as_array())
        val = evaluate_accuracy(model, feats, "val", splits["val"], cfg.val_episodes, phase_rng(cfg.seed, "val"))
        eta = a_opt.lr if a_opt is not None else float("nan")
        if metrics is not None:
            metrics.add(epoch, tag, "train_w", stats.train_w.mean_loss(), stats.train_w.mean_accuracy(), eta, w_opt.lr)
            if a_opt is not None:
                metrics.add(epoch, tag, "train_alpha", stats.train_alpha.mean_loss(), stats.train_alpha.mean_accuracy(), eta, w_opt.lr)
            metrics.add(epoch, tag, "val", acc=val, eta=eta, mu=w_opt.lr)
        if on_epoch is not None:
            on_epoch(epoch, model)
    train_acc = evaluate_accuracy(
        model, feats, "train", train, cfg.gap_episodes, phase_rng(cfg.seed, "gap-train"), pool=folds.pool_w
    )
    val_acc = evaluate_accuracy(model, feats, "val", splits["val"], cfg.gap_episodes, phase_rng(cfg.seed, "gap-val"))
    if metrics is not None:
        metrics.add(cfg.search_epochs, tag, "gap_train", acc=train_acc)
        metrics.add(cfg.search_epochs, tag, "gap_val", acc=val_acc)
    model.block.eval()
    return SearchResult(train_acc, val_acc, history)


def train_controllers(
    model: Model,
    feats: FeatureCache,
    splits: dict[str, Dataset],
    metrics: Metrics | None = None,
    *,
    flip: bool | None = None,
    tag: str = "controllers",
) -> list[float]:
    """Train a fresh controller bank with everything else frozen.

    Returns the adapted validation accuracy after each epoch, preceded by the
    value at initialisation.
    """
    cfg = model.cfg
    flip = cfg.flip if flip is None else flip
    rng = phase_rng(cfg.seed, tag)
    bank = attach_bank(model, phase_rng(cfg.seed, tag + "-init"), flip)
    before = {"block": model.block.checksum(), "alpha": model.alpha.as_array().tobytes()}
    for t in model.alpha.tensors():
        t.requires_grad = False
    model.block.requires_grad_(False)
    params = bank.parameters()
    opt = SGD(params, cfg.controller_lr, cfg.momentum, cfg.weight_decay)
    train = splits["train"]
    val_rng = lambda: phase_rng(cfg.seed, "val")  # noqa: E731
    curve = [evaluate_accuracy(model, feats, "val", splits["val"], cfg.val_episodes, val_rng(), flip=flip, use_bank=True)]
    if metrics is not None:
        metrics.add(-1, tag, "val", acc=curve[0], mu=opt.lr)
    for epoch in range(cfg.controller_epochs):
        model.block.train()
        losses, accs = [], []
        eps = list(episodes(train, cfg, cfg.controller_episodes, rng, flip=flip))
        for batch in batched(eps, cfg.batch_episodes):
            if model.gumbel is not None:
                model.gumbel.resample(model.alpha)
            total = None
            with frozen_stats(model.block):
                for ep in batch:
                    logits = episode_logits(model, feats, "train", ep, use_bank=True)
                    l = episode_loss(logits, ep.query_y)
                    total = l if total is None else total + l
                    accs.append(accuracy(logits, ep.query_y))
            total = total * (1.0 / len(batch))
            opt.step(grad(total, params))
            losses.append(float(total.item()))
        val = evaluate_accuracy(model, feats, "val", splits["val"], cfg.val_episodes, val_rng(), flip=flip, use_bank=True)
        curve.append(val)
        if metrics is not None:
            metrics.add(epoch, tag, "train", float(np.mean(losses)), float(np.mean(accs)), mu=opt.lr)
            metrics.add(epoch, tag, "val", acc=val, mu=opt.lr)
    model.block.requires_grad_(True)
    model.block.eval()
    if model.block.checksum() != before["block"] or model.alpha.as_array().tobytes() != before["alpha"]:
        raise MetAdaptError("controller training modified frozen parameters")
    return curve


@dataclass
class EvalReport:
    accuracies: np.ndarray
    config_hash: str

    @property
    def mean(self) -> float:
        return float(np.mean(self.accuracies))

    @property
    def ci95(self) -> float:
        return confidence_halfwidth(self.accuracies)

    def as_dict(self) -> dict:
        return {
            "accuracy_mean": self.mean,
            "ci95": self.ci95,
            "episodes": int(len(self.accuracies)),
            "config_hash": self.config_hash,
        }


def confidence_halfwidth(values) -> float:
    v = np.asarray(values, dtype=np.float64)
    return float(1.96 * v.std() / np.sqrt(len(v)))


def evaluate(
    model: Model,
    feats: FeatureCache,
    splits: dict[str, Dataset],
    *,
    episodes_count: int | None = None,
    flip: bool | None = None,
    finetune: bool | None = None,
    use_bank: bool | None = None,
    use_plain: bool = False,
    dump_alpha: Path | None = None,
    split: str = "test",
) -> EvalReport:
    """Meta-test accuracy over independent episodes.

    The same seed always yields the same episodes, so reports for different
    model variants are paired. Fine-tuning works on a copy of the block
    weights that is restored after every episode.
    """
    cfg = model.cfg
    flip = cfg.flip if flip is None else flip
    finetune = cfg.finetune if finetune is None else finetune
    use_bank = (model.bank is not None) if use_bank is None else use_bank
    if use_bank and model.bank is None:
        raise PreconditionError("controller evaluation needs a trained controller bank")
    if use_bank and model.bank.support_size != cfg.n_way * cfg.k_shot * (2 if flip else 1):
        raise PreconditionError(
            f"controllers were trained for support size {model.bank.support_size}; evaluation uses "
            f"{cfg.n_way * cfg.k_shot * (2 if flip else 1)} (flip={flip})"
        )
    count = cfg.eval_episodes if episodes_count is None else episodes_count
    rng = phase_rng(cfg.seed, "eval")
    ds = splits[split]
    _set_eval(model)
    if dump_alpha is not None:
        dump_alpha.mkdir(parents=True, exist_ok=True)
    accs = []
    for k in range(count):
        ep = canonical(sample_episode(ds, cfg.n_way, cfg.k_shot, cfg.q_query, rng))
        ep_eval = canonical(hflip_augment(ep)) if flip else ep
        saved = None
        if finetune and not use_plain:
            saved = {n: p.data.copy() for n, p in model.block.named_parameters()}
            _finetune(model, feats, split, ep, ep_eval if use_bank else None)
        with no_grad():
            logits = episode_logits(model, feats, split, ep_eval, use_plain=use_plain, use_bank=use_bank, training=False)
            if dump_alpha is not None and use_bank:
                _, adapted = adapted_block_forward(
                    Tensor(feats.support(split, ep_eval)), Tensor(feats.query(split, ep_eval)), model.block, model.bank
                )
                (dump_alpha / f"episode_{k:05d}.csv").write_text(adapted.to_csv())
        accs.append(accuracy(logits, ep_eval.query_y))
        if saved is not None:
            for n, p in model.block.named_parameters():
                p.data = saved[n]
    return EvalReport(np.array(accs), cfg.structural_hash())


def _finetune(model: Model, feats: FeatureCache, split: str, ep: Episode, ep_bank: Episode | None) -> None:
    """A few SGD steps on the block weights with the mirrored support set as labelled queries."""
    cfg = model.cfg
    params = model.block.parameters()
    opt = SGD(params, cfg.finetune_lr, cfg.momentum, cfg.weight_decay)
    xs = Tensor(feats.support(split, ep))
    xq = Tensor(feats.feats[(split, True)][ep.support_ids])
    alpha = model.alpha
    if ep_bank is not None:
        with no_grad():
            _, adapted = adapted_block_forward(
                Tensor(feats.support(split, ep_bank)), Tensor(feats.query(split, ep_bank)), model.block, model.bank
            )
        alpha = AlphaTable(adapted.nodes, adapted.ops, {e: Tensor(t.data) for e, t in adapted.logits.items()})
    weights = _test_weights(alpha) if model.gumbel is not None else None
    model.block.train()
    with frozen_stats(model.block):
        for _ in range(cfg.finetune_iters):
            out = block_forward(concat([xs, xq], axis=0), model.block, alpha, edge_weights=weights)
            emb = embed(out)
            s = xs.shape[0]
            logits = head_logits(cfg.head_config, emb[:s], ep.support_y, emb[s:], ep.n_way)
            opt.step(grad(episode_loss(logits, ep.support_y), params))
    model.block.eval()


# ----------------------------------------------------------------------
# checkpoints and run directories
# ----------------------------------------------------------------------


def rng_state(seed: int) -> dict:
    return {"seed": seed, "bit_generator": np.random.default_rng(seed).bit_generator.state}


def save_model(path: Path, model: Model, phase: str, extra_meta: dict | None = None) -> None:
    meta = {"config": json.loads(model.cfg.to_json()), "rng": rng_state(model.cfg.seed)}
    if model.block is not None:
        meta["ops"] = [o.label for o in model.block.ops]
    if model.bank is not None:
        meta["bank_flip"] = model.bank.support_size == 2 * model.cfg.n_way * model.cfg.k_shot
    meta.update(extra_meta or {})
    save_checkpoint(path, Checkpoint(phase, model.cfg.structural_hash(), model.arrays(), meta))


def load_model(path: Path, cfg: RunConfig, image_shape, expect_phase: Sequence[str] | None = None, force: bool = False) -> Model:
    ck = load_checkpoint(path, cfg.structural_hash(), force=force)
    if expect_phase is not None and ck.phase not in expect_phase:
        raise PreconditionError(f"{path}: phase {ck.phase!r}, expected one of {list(expect_phase)}")
    return model_from_checkpoint(cfg, ck, image_shape)


@contextlib.contextmanager
def run_dir(cfg: RunConfig):
    """Create the output directory and hold its lock file for the duration."""
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    lock = out / ".lock"
    try:
        fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise PreconditionError(f"{out} is locked by another run (remove {lock} if stale)") from None
    try:
        os.write(fd, str(os.getpid()).encode())
        os.close(fd)
        yield out
    finally:
        lock.unlink(missing_ok=True)


def write_alpha_exports(out: Path, model: Model, stem: str) -> None:
    (out / f"{stem}.csv").write_text(model.alpha.to_csv())
    (out / f"{stem}.dot").write_text(export_dot(model.block, model.alpha))


# ----------------------------------------------------------------------
# ablation matrix
# ----------------------------------------------------------------------

ABLATION_ROWS = {
    "a": "Plain residual block",
    "b": "DAG block, uniform alpha",
    "c": "+ optimised alpha (first order)",
    "d": "+ second-order alpha update",
    "e": "+ 5x5 operations",
    "f": "+ controllers",
    "g": "+ test-time flip",
    "h": "+ test-time fine-tuning",
}


@dataclass
class AblationRun:
    seed: int
    row: str
    accuracy: float
    ci95: float
    gap: float = float("nan")


def ablate_seed(cfg: RunConfig, splits, rows: str = "abcdefgh", metrics: Metrics | None = None) -> list[AblationRun]:
    """All requested rows for one seed; rows share the pretrained stem and searches."""
    base = replace(cfg, flip=False, finetune=False, stochastic=False)
    model = pretrain(base, splits, metrics)
    feats = FeatureCache(model.stem, splits)
    out: list[AblationRun] = []

    def record(row, report: EvalReport, gap=float("nan")):
        out.append(AblationRun(cfg.seed, row, report.mean, report.ci95, gap))

    if "a" in rows:
        record("a", evaluate(model, feats, splits, use_plain=True, use_bank=False))
    for row, ops, order, uniform in (("b", "reduced", "first", True), ("c", "reduced", "first", False), ("d", "reduced", "second", False)):
        if row in rows:
            # paired rows: only alpha handling differs, not init or episodes
            res = search(model, feats, splits, metrics, ops=ops, order=order, uniform=uniform, tag=f"search-{row}", rng_tag="search-reduced")
            record(row, evaluate(model, feats, splits, use_bank=False), res.gap)
    if any(r in rows for r in "efgh"):
        res = search(model, feats, splits, metrics, ops="full", order="second", uniform=False, tag="search-e")
        if "e" in rows:
            record("e", evaluate(model, feats, splits, use_bank=False), res.gap)
        if "f" in rows:
            train_controllers(model, feats, splits, metrics, flip=False, tag="controllers-f")
            record("f", evaluate(model, feats, splits, use_bank=True, flip=False))
        if "g" in rows or "h" in rows:
            train_controllers(model, feats, splits, metrics, flip=True, tag="controllers-g")
            if "g" in rows:
                record("g", evaluate(model, feats, splits, use_bank=True, flip=True))
            if "h" in rows:
                record("h", evaluate(model, feats, splits, use_bank=True, flip=True, finetune=True))
    return out


def ablation_table(runs: list[AblationRun]) -> tuple[str, str]:
    """Markdown and CSV summaries: mean accuracy over seeds with a 95% interval."""
    rows = sorted({r.row for r in runs})
    md = ["| row | description | accuracy (%) | 95% CI | seeds | gap |", "|---|---|---|---|---|---|"]
    buf = [["row", "description", "accuracy_mean", "ci95", "seeds", "gap_mean"]]
    for row in rows:
        rs = [r for r in runs if r.row == row]
        acc = np.array([r.accuracy for r in rs])
        gaps = np.array([r.gap for r in rs])
        ci = confidence_halfwidth(acc) if len(acc) > 1 else rs[0].ci95
        gap = float(np.mean(gaps)) if not np.isnan(gaps).all() else float("nan")
        gap_txt = "" if np.isnan(gap) else f"{100 * gap:.2f}"
        md.append(f"| {row} | {ABLATION_ROWS[row]} | {100 * acc.mean():.2f} | ±{100 * ci:.2f} | {len(rs)} | {gap_txt} |")
        buf.append([row, ABLATION_ROWS[row], f"{acc.mean():.6f}", f"{ci:.6f}", str(len(rs)), "" if np.isnan(gap) else f"{gap:.6f}"])
    by = {(r.seed, r.row): r.accuracy for r in runs}
    seeds = sorted({r.seed for r in runs})
    if all((s, "e") in by and (s, "f") in by for s in seeds) and seeds:
        diff = np.array([by[(s, "f")] - by[(s, "e")] for s in seeds])
        md.append("")
        md.append(f"f - e: {100 * diff.mean():+.2f} ± {100 * confidence_halfwidth(diff):.2f} points over {len(seeds)} seeds")
    csv_text = "\n".join(",".join(f'"{c}"' if "," in c else c for c in line) for line in buf) + "\n"
    return "\n".join(md) + "\n", csv_text
