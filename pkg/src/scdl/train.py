"""Composite semi-supervised training loop and evaluation."""
import logging
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .anchors import AnchorMemory, compute_anchors, loss_sac
from .autodiff import Tensor
from .metrics import class_metrics
from .model import SegNet
from .priors import FusionHead, build_priors, project_and_inject
from .proxy import ProxyBank, loss_e2p_mean, loss_p2e, sample_proxies, soft_assign, token_cosines

log = logging.getLogger(__name__)

DICE_SMOOTH = 1e-5


class TrainingDivergedError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    lambda_e2p: float = 0.1
    lambda_p2e: float = 0.1
    lambda_sac: float = 0.1
    enable_cdba: bool = True
    enable_sac: bool = True
    enable_injection: bool = True
    lr: float = 0.01
    lr_schedule: str = "poly"
    lr_power: float = 0.9
    momentum: float = 0.9
    weight_decay: float = 0.0
    weight_decay_scdl: float = 1e-4
    batch_size: int = 4
    labeled_per_batch: int = 2
    steps: int = 2000
    samples_S: int = 5
    perturb_K: int = 4
    dim: int = 32
    width: int = 8
    eval_interval: int = 0
    ema_anchors: bool = False
    seed: int = 0

    def validate(self):
        for name in ("lambda_e2p", "lambda_p2e", "lambda_sac", "lr", "weight_decay", "weight_decay_scdl"):
            if getattr(self, name) < 0:
                raise ValueError(f"invariant violated: {name} >= 0")
        if self.enable_sac and not self.enable_cdba:
            raise ValueError("invariant violated: enable_sac requires enable_cdba")
        if not 0 <= self.labeled_per_batch <= self.batch_size or self.batch_size < 1:
            raise ValueError("invariant violated: 0 <= labeled_per_batch <= batch_size")
        if self.samples_S < 1 or self.perturb_K < 1:
            raise ValueError("invariant violated: samples_S >= 1 and perturb_K >= 1")
        if self.steps < 0:
            raise ValueError("invariant violated: steps >= 0")
        if self.lr_schedule not in ("poly", "constant"):
            raise ValueError("invariant violated: lr_schedule is 'poly' or 'constant'")


class SGD:
    """Heavy-ball SGD with per-group weight decay."""

    def __init__(self, groups, lr, momentum):
        self.groups = [(list(params), wd) for params, wd in groups]
        self.lr = lr
        self.momentum = momentum
        self.velocity = [[np.zeros_like(p.data) for p in params] for params, _ in self.groups]

    def step(self):
        for (params, wd), vel in zip(self.groups, self.velocity):
            for p, v in zip(params, vel):
                g = p.grad if wd == 0 else p.grad + wd * p.data
                v *= self.momentum
                v += g
                p.data = p.data - self.lr * v

    def zero_grad(self):
        for params, _ in self.groups:
            for p in params:
                p.zero_grad()


def seg_loss(logits, labels, num_classes):
    """Cross-entropy plus soft-Dice (equal weights) over all given pixels."""
    onehot = np.moveaxis(np.eye(num_classes)[labels], -1, 1)
    onehot_t = Tensor(onehot)
    logp = ad.log_softmax(logits, axis=1)
    ce = -ad.mean(ad.sum_(logp * onehot_t, axis=1))
    prob = ad.exp(logp)
    inter = ad.sum_(prob * onehot_t, axis=(0, 2, 3))
    denom = ad.sum_(prob, axis=(0, 2, 3)) + onehot.sum(axis=(0, 2, 3))
    soft_dice = ad.mean((2.0 * inter + DICE_SMOOTH) / (denom + DICE_SMOOTH))
    return ce + (1.0 - soft_dice)


class Trainer:
    """Holds the network, proxy bank, fusion head, optimiser and RNG streams."""

    def __init__(self, cfg, num_classes, image_shape=(64, 64)):
        cfg.validate()
        self.cfg = cfg
        self.num_classes = num_classes
        self.image_shape = tuple(image_shape)
        ss = np.random.SeedSequence(cfg.seed)
        net_ss, proxy_ss, head_ss, data_ss, mc_ss = ss.spawn(5)
        self.net = SegNet(np.random.default_rng(net_ss), num_classes=num_classes,
                          dim=cfg.dim, width=cfg.width)
        self.bank = ProxyBank.init(num_classes, cfg.dim, np.random.default_rng(proxy_ss))
        self.head = FusionHead.init(cfg.dim, cfg.width, np.random.default_rng(head_ss), K=cfg.perturb_K)
        self.data_rng = np.random.default_rng(data_ss)
        self.mc_rng = np.random.default_rng(mc_ss)
        self.eval_seed = int(mc_ss.generate_state(1)[0])
        self.grid = (self.image_shape[0] // 4, self.image_shape[1] // 4)
        self.memory = AnchorMemory(num_classes, cfg.dim) if cfg.ema_anchors else None
        self.opt = SGD([(self.net.parameters(), cfg.weight_decay),
                        (self.bank.parameters() + self.head.parameters(), cfg.weight_decay_scdl)],
                       cfg.lr, cfg.momentum)
        self.step_count = 0

    # -- forward ----------------------------------------------------------
    def _injections(self, Z, rng, cosines=None):
        samples = sample_proxies(self.bank, self.cfg.samples_S, rng)
        priors = build_priors(Z, self.bank, self.head, samples, rng, cosines=cosines)
        return project_and_inject(priors.z_prior, self.head, self.grid,
                                  self.net.stage_shapes(*self.image_shape))

    def forward_logits(self, images, rng):
        x = Tensor(np.asarray(images, dtype=np.float64)[:, None])
        grid = self.net.encode_grid(x)
        inj = None
        if self.cfg.enable_injection:
            inj = self._injections(self.net.grid_to_tokens(grid), rng)
        return self.net.decode(grid, inj)

    def compute_losses(self, images, labels, labeled, rng=None, anchors=None):
        """Total loss Tensor and a dict of component Tensors for one batch.

        ``anchors`` overrides the per-batch anchor computation (they are
        constants either way).
        """
        cfg = self.cfg
        rng = self.mc_rng if rng is None else rng
        labeled = np.asarray(labeled, dtype=bool)
        x = Tensor(np.asarray(images, dtype=np.float64)[:, None])
        grid = self.net.encode_grid(x)
        Z = self.net.grid_to_tokens(grid)
        terms = {}
        cosines = None
        if cfg.enable_cdba or cfg.enable_injection:
            cosines = token_cosines(Z, self.bank)
        if cfg.enable_cdba:
            P = soft_assign(Z, self.bank, cosines)
            terms["e2p"] = loss_e2p_mean(Z, self.bank, P, cosines)
            terms["p2e"] = loss_p2e(Z, self.bank, P, cosines)
        inj = self._injections(Z, rng, cosines) if cfg.enable_injection else None
        logits = self.net.decode(grid, inj)
        if labeled.any():
            terms["seg"] = seg_loss(ad.masked_select(logits, labeled), labels[labeled], self.num_classes)
            if cfg.enable_sac:
                if anchors is None:
                    anchors = self.batch_anchors(x.data[labeled], labels[labeled])
                if anchors.present.any():
                    terms["sac"] = loss_sac(self.bank, anchors)
        total = terms["seg"] if "seg" in terms else None
        for name, lam in (("e2p", cfg.lambda_e2p), ("p2e", cfg.lambda_p2e), ("sac", cfg.lambda_sac)):
            if name in terms:
                total = terms[name] * lam if total is None else total + terms[name] * lam
        if total is None:
            total = Tensor(0.0)
        return total, terms

    def batch_anchors(self, x, labels):
        """Anchors for a labeled sub-batch; ``x`` is (N, 1, H, W)."""
        anchors = compute_anchors(self.net.encode, x, labels, self.num_classes, self.grid)
        if self.memory is not None:
            anchors = self.memory.update(anchors)
        return anchors

    # -- optimisation -----------------------------------------------------
    def sample_batch(self, dataset):
        cfg = self.cfg
        lab_idx = np.flatnonzero(dataset.labeled)
        unl_idx = np.flatnonzero(~dataset.labeled)
        n_lab = min(cfg.labeled_per_batch, len(lab_idx)) if len(unl_idx) else cfg.batch_size
        n_lab = min(n_lab, len(lab_idx))
        n_unl = cfg.batch_size - n_lab
        if n_unl > len(unl_idx):
            n_unl = len(unl_idx)
            n_lab = min(cfg.batch_size - n_unl, len(lab_idx))
        pick = np.concatenate([self.data_rng.choice(lab_idx, n_lab, replace=False) if n_lab else [],
                               self.data_rng.choice(unl_idx, n_unl, replace=False) if n_unl else []])
        return pick.astype(np.int64)

    def current_lr(self):
        """Learning rate for the next step: lr * (1 - t/steps)^power under "poly"."""
        cfg = self.cfg
        if cfg.lr_schedule == "constant" or cfg.steps == 0:
            return cfg.lr
        frac = min(self.step_count, cfg.steps) / cfg.steps
        return cfg.lr * (1.0 - frac) ** cfg.lr_power

    def train_step(self, images, labels, labeled):
        self.opt.zero_grad()
        self.opt.lr = self.current_lr()
        try:
            total, terms = self.compute_losses(images, labels, labeled)
        except ad.NonFiniteError as exc:
            raise TrainingDivergedError(f"non-finite value at step {self.step_count}: {exc}") from exc
        if total.requires_grad:
            total.backward()
        self.opt.step()
        self.step_count += 1
        out = {"total": float(total.data)}
        for name in ("seg", "e2p", "p2e", "sac"):
            out[name] = float(terms[name].data) if name in terms else 0.0
        return out

    def fit_step(self, dataset):
        idx = self.sample_batch(dataset)
        return self.train_step(dataset.images[idx], dataset.labels[idx].astype(np.int64),
                               dataset.labeled[idx])

    # -- persistence ------------------------------------------------------
    def state_dict(self):
        state = {}
        state.update(self.net.state_dict())
        state.update(self.bank.state_dict())
        state.update(self.head.state_dict())
        if self.memory is not None:
            state.update(self.memory.state_dict())
        return state

    def load_state_dict(self, state):
        self.net.load_state_dict(state)
        self.bank.load_state_dict(state)
        self.head.load_state_dict(state)
        if self.memory is not None and "sac.ema_anchors" in state:
            self.memory.anchors = np.array(state["sac.ema_anchors"], dtype=np.float64)
            self.memory.seen = np.any(self.memory.anchors != 0, axis=1)

    def predict(self, images, batch_size=16):
        rng = np.random.default_rng(self.eval_seed)
        preds = []
        with ad.no_grad():
            for start in range(0, len(images), batch_size):
                logits = self.forward_logits(images[start:start + batch_size], rng)
                preds.append(np.argmax(logits.data, axis=1))
        return np.concatenate(preds, axis=0) if preds else np.zeros((0,) + self.image_shape, dtype=np.int64)


def summarize(preds, labels, num_classes):
    """Macro metrics: average over images per class, then over foreground classes."""
    if len(labels) == 0:
        raise ValueError("cannot evaluate an empty split")
    per = [class_metrics(p, g, num_classes) for p, g in zip(preds, labels)]
    dice = np.mean([m.dice for m in per], axis=0)
    asd = np.mean([m.asd for m in per], axis=0)
    return {
        "dice": dice.tolist(),
        "asd": asd.tolist(),
        "mean_dice": float(dice[1:].mean()),
        "mean_asd": float(asd[1:].mean()),
    }


def evaluate(trainer, dataset):
    return summarize(trainer.predict(dataset.images), dataset.labels, dataset.num_classes)
