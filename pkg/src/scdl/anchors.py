"""Semantic anchors from labeled, class-masked images and the proxy/anchor
alignment loss."""
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import ShapeError, Tensor

FILL_VALUE = 0.0


@dataclass
class AnchorSet:
    anchors: np.ndarray  # C x D, constant
    present: np.ndarray  # C bools
    counts: np.ndarray  # C ints


class NoAnchorsError(ValueError):
    """Raised when no class has a labeled token in the batch."""


def mask_class_image(x, y, c, background=0, fill=FILL_VALUE):
    x = np.asarray(x)
    y = np.asarray(y)
    if x.shape[-2:] != y.shape[-2:]:
        raise ShapeError(f"image {x.shape} and label {y.shape} differ spatially")
    if c == background:
        raise ValueError("background has no semantic anchor")
    return np.where(y == c, x, fill)


def token_mask(y, grid):
    """True where a token's pixel cell contains at least one nonzero entry of ``y``.

    ``y`` is (B, H, W) boolean; result is (B, H'*W').
    """
    B, H, W = y.shape
    gh, gw = grid
    if H % gh or W % gw:
        raise ShapeError(f"{H}x{W} labels do not tile a {gh}x{gw} token grid")
    cells = y.reshape(B, gh, H // gh, gw, W // gw)
    return cells.any(axis=(2, 4)).reshape(B, gh * gw)


def compute_anchors(encode, images, labels, num_classes, grid, background=0,
                    fill=FILL_VALUE):
    """Mean encoder embedding over the tokens that touch each class.

    ``encode`` maps an (N, 1, H, W) array to a B x L x D Tensor.  Each class is
    encoded from its own masked copy of the images; the result carries no
    graph.
    """
    images = np.asarray(images, dtype=np.float64)
    labels = np.asarray(labels)
    if images.shape[0] == 0:
        raise ValueError("anchor computation needs at least one labeled sample")
    present = np.zeros(num_classes, dtype=bool)
    counts = np.zeros(num_classes, dtype=np.int64)
    selections, masked = {}, []
    for c in range(num_classes):
        if c == background:
            continue
        sel = token_mask(labels == c, grid)
        counts[c] = int(sel.sum())
        if counts[c]:
            selections[c] = sel
            masked.append(mask_class_image(images, labels[:, None], c, background, fill))
    if not selections:
        return AnchorSet(np.zeros((num_classes, 0)), present, counts)
    # one encoder pass over every class-masked copy
    with ad.no_grad():
        Z = encode(np.concatenate(masked, axis=0)).data
    n = images.shape[0]
    anchors = np.zeros((num_classes, Z.shape[-1]))
    for k, (c, sel) in enumerate(selections.items()):
        anchors[c] = Z[k * n:(k + 1) * n][sel].mean(axis=0)
        present[c] = True
    return AnchorSet(anchors, present, counts)


def loss_sac(bank, anchor_set):
    """Mean over present classes of 1 - cos(mu_c, anchor_c)."""
    idx = np.flatnonzero(anchor_set.present)
    if idx.size == 0:
        raise NoAnchorsError("no class has labeled tokens in this batch")
    if anchor_set.anchors.shape != bank.mu.shape:
        raise ShapeError(f"anchors {anchor_set.anchors.shape} != proxies {bank.mu.shape}")
    mu = ad.getitem(bank.mu, idx)
    target = Tensor(anchor_set.anchors[idx])
    return ad.mean(1.0 - ad.cosine_similarity(mu, target))


class AnchorMemory:
    """Exponential moving average of anchors, filling classes absent from a batch."""

    def __init__(self, num_classes, dim, decay=0.99):
        self.decay = decay
        self.anchors = np.zeros((num_classes, dim))
        self.seen = np.zeros(num_classes, dtype=bool)

    def update(self, anchor_set):
        for c in np.flatnonzero(anchor_set.present):
            if self.seen[c]:
                self.anchors[c] = self.decay * self.anchors[c] + (1 - self.decay) * anchor_set.anchors[c]
            else:
                self.anchors[c] = anchor_set.anchors[c]
                self.seen[c] = True
        return AnchorSet(self.anchors.copy(), self.seen.copy(), anchor_set.counts)

    def state_dict(self):
        return {"sac.ema_anchors": self.anchors}
