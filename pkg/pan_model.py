"""
The PAN network: position embeddings, PACu / PAC / PASTI blocks with
residual connections, the PACu head, the combined L1/L2 loss, the training
loop and the ablation variants.

Every layer computes `_forward(x, mode, rng) -> (out, cache)` and
`_backward(cache, grad) -> grad_in`. The public `forward` keeps the cache of
the last recorded pass for `backward`; with `record=False` nothing is stored,
so a trained model can serve eval-mode inference from several threads.
"""

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Any, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from errors import ConfigurationError, DataError, NumericalError
from sequence_builder import FrameStore, WindowConfig, materialize_batch
from tensor_core import (
    Adam,
    ConvKernel,
    Mode,
    Parameter,
    Tensor,
    add,
    add_backward,
    check_mode,
    concat_channels,
    conv2d_backward,
    conv2d_forward,
    dropout,
    dropout_backward,
    relu_backward,
    relu_forward,
    split_channels,
)

logger = logging.getLogger(__name__)

VARIANTS = ("full", "no_pac", "one_pac")
FUSIONS = ("sum", "mul", "concat")
# head bias under zero head init: middle of the normalised range
HEAD_BIAS = 0.5


class Layer:
    """Base for layers with a recorded forward pass"""

    _cache: Any = None
    _recorded: bool = False

    def _forward(self, x: Tensor, mode: Mode, rng) -> Tuple[Tensor, Any]:
        raise NotImplementedError

    def _backward(self, cache: Any, grad: Tensor) -> Tensor:
        raise NotImplementedError

    def parameters(self) -> List[Parameter]:
        raise NotImplementedError

    def forward(self, x: Tensor, mode: Mode = "eval", rng: Optional[np.random.Generator] = None,
                record: bool = True) -> Tensor:
        check_mode(mode)
        out, cache = self._forward(x, mode, rng)
        if record:
            self._cache = cache
            self._recorded = True
        return out

    def backward(self, grad: Tensor) -> Tensor:
        if not self._recorded:
            raise ConfigurationError(f"{type(self).__name__}.backward called before a recorded forward pass")
        return self._backward(self._cache, grad)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()


class PositionEmbedding(Layer):
    """Learnable (1, I, J, c) grid fused into a feature map of the same shape."""

    def __init__(self, name: str, rows: int, cols: int, channels: int, fusion: str = "sum"):
        if fusion not in FUSIONS:
            raise ConfigurationError(f"{name}: unknown position-embedding fusion '{fusion}'")
        init = np.ones if fusion == "mul" else np.zeros
        self.name = name
        self.fusion = fusion
        self.channels = channels
        self.grid = Parameter(f"{name}.grid", init((1, rows, cols, channels)))

    @property
    def out_channels(self) -> int:
        return 2 * self.channels if self.fusion == "concat" else self.channels

    def parameters(self) -> List[Parameter]:
        return [self.grid]

    def _check(self, x: Tensor) -> None:
        if x.ndim != 4 or x.shape[1:] != self.grid.shape[1:]:
            raise ConfigurationError(
                f"{self.name}: feature map {x.shape} does not match embedding grid {self.grid.shape[1:]}"
            )

    def _forward(self, x, mode, rng):
        self._check(x)
        e = self.grid.value
        if self.fusion == "sum":
            return add(x, e), None
        if self.fusion == "mul":
            return x * e, x
        return concat_channels([x, np.broadcast_to(e, x.shape)]), None

    def _backward(self, cache, grad):
        if self.fusion == "sum":
            grad_x, grad_e = add_backward(grad, self.grid.shape)
        elif self.fusion == "mul":
            grad_x = grad * self.grid.value
            grad_e = (grad * cache).sum(axis=0, keepdims=True)
        else:
            grad_x, grad_e = split_channels(grad, [self.channels, self.channels])
            grad_e = grad_e.sum(axis=0, keepdims=True)
        self.grid.grad += grad_e
        return grad_x


class PACuLayer(Layer):
    """PE -> conv(s, c) -> ReLU. `pe` is None for the position-agnostic ablation."""

    def __init__(self, name: str, rows: int, cols: int, c_in: int, size: int, filters: int,
                 rng: np.random.Generator, use_pe: bool = True, fusion: str = "sum", init: str = "he"):
        self.name = name
        self.pe = PositionEmbedding(f"{name}.pe", rows, cols, c_in, fusion) if use_pe else None
        conv_in = self.pe.out_channels if self.pe else c_in
        self.conv = ConvKernel(f"{name}.conv", conv_in, filters, size, rng, init=init)

    @property
    def size(self) -> int:
        return self.conv.size

    @property
    def filters(self) -> int:
        return self.conv.c_out

    def parameters(self) -> List[Parameter]:
        return (self.pe.parameters() if self.pe else []) + self.conv.parameters()

    def _forward(self, x, mode, rng):
        pe_cache = None
        h = x
        if self.pe:
            h, pe_cache = self.pe._forward(x, mode, rng)
        z = conv2d_forward(h, self.conv)
        return relu_forward(z), (pe_cache, h, z)

    def _backward(self, cache, grad):
        pe_cache, h, z = cache
        grad_h = conv2d_backward(h, self.conv, relu_backward(z, grad))
        return self.pe._backward(pe_cache, grad_h) if self.pe else grad_h


class PACBlock(Layer):
    """1x1 entry conv -> m identical PACu(s, c) -> 1x1 exit conv."""

    def __init__(self, name: str, rows: int, cols: int, c_in: int, depth: int, size: int, filters: int,
                 rng: np.random.Generator, use_pe: bool = True, fusion: str = "sum"):
        if depth < 1:
            raise ConfigurationError(f"{name}: a PAC needs at least one PACu (got m={depth})")
        self.name = name
        self.entry = ConvKernel(f"{name}.entry", c_in, filters, 1, rng)
        self.units = [
            PACuLayer(f"{name}.unit{u:02d}", rows, cols, filters, size, filters, rng, use_pe, fusion)
            for u in range(depth)
        ]
        self.exit = ConvKernel(f"{name}.exit", filters, filters, 1, rng)

    @property
    def filters(self) -> int:
        return self.exit.c_out

    def parameters(self) -> List[Parameter]:
        params = self.entry.parameters()
        for unit in self.units:
            params += unit.parameters()
        return params + self.exit.parameters()

    def _forward(self, x, mode, rng):
        h = conv2d_forward(x, self.entry)
        unit_caches = []
        for unit in self.units:
            h, c = unit._forward(h, mode, rng)
            unit_caches.append(c)
        return conv2d_forward(h, self.exit), (x, unit_caches, h)

    def _backward(self, cache, grad):
        x, unit_caches, h = cache
        g = conv2d_backward(h, self.exit, grad)
        for unit, c in zip(reversed(self.units), reversed(unit_caches)):
            g = unit._backward(c, g)
        return conv2d_backward(x, self.entry, g)


# (depth m, kernel size s) of the three PAC kinds, in concat order
PAC_KINDS = ((1, 1), (1, 3), (2, 3))


class PastiBlock(Layer):
    """Parallel PACs -> concat -> dropout -> 1x1 merge -> ReLU, plus the residual input."""

    def __init__(self, name: str, rows: int, cols: int, c_f: int, kinds: Sequence[Tuple[int, int, int, int]],
                 dropout_rate: float, rng: np.random.Generator, merge_init: str = "he",
                 use_pe: bool = True, fusion: str = "sum"):
        """`kinds` lists (copies, depth, size, filters) per PAC kind."""
        self.name = name
        self.c_f = c_f
        self.dropout_rate = dropout_rate
        self.pacs: List[PACBlock] = []
        for copies, depth, size, filters in kinds:
            for _ in range(copies):
                idx = len(self.pacs)
                self.pacs.append(
                    PACBlock(f"{name}.pac{idx:02d}", rows, cols, c_f, depth, size, filters, rng, use_pe, fusion)
                )
        if not self.pacs:
            raise ConfigurationError(f"{name}: a PASTI block needs at least one PAC")
        self.merge = ConvKernel(f"{name}.merge", self.concat_width, c_f, 1, rng, init=merge_init)

    @property
    def concat_width(self) -> int:
        return sum(p.filters for p in self.pacs)

    def parameters(self) -> List[Parameter]:
        params = []
        for pac in self.pacs:
            params += pac.parameters()
        return params + self.merge.parameters()

    def _forward(self, x, mode, rng):
        if x.ndim != 4 or x.shape[3] != self.c_f:
            raise ConfigurationError(f"{self.name}: expects {self.c_f} input channels, got shape {x.shape}")
        outs, pac_caches = zip(*(pac._forward(x, mode, rng) for pac in self.pacs))
        cat = concat_channels(list(outs))
        dropped, mask = dropout(cat, self.dropout_rate, mode, rng)
        z = conv2d_forward(dropped, self.merge)
        out = add(relu_forward(z), x)
        if out.shape != x.shape:
            raise ConfigurationError(f"{self.name}: output {out.shape} breaks the residual contract {x.shape}")
        return out, (pac_caches, mask, dropped, z)

    def _backward(self, cache, grad):
        pac_caches, mask, dropped, z = cache
        grad_dropped = conv2d_backward(dropped, self.merge, relu_backward(z, grad))
        parts = split_channels(dropout_backward(grad_dropped, mask), [p.filters for p in self.pacs])
        grad_x = grad.copy()
        for pac, c, g in zip(self.pacs, pac_caches, parts):
            grad_x += pac._backward(c, g)
        return grad_x


class PanModel(Layer):
    """Stem 1x1 conv -> optional input PE -> PASTI stack -> PACu(1, K) head."""

    def __init__(self, stem: ConvKernel, blocks: List[PastiBlock], head: PACuLayer,
                 variant: str = "full", input_pe: Optional[PositionEmbedding] = None):
        self.stem = stem
        self.input_pe = input_pe
        self.blocks = blocks
        self.head = head
        self.variant = variant

    @property
    def in_channels(self) -> int:
        return self.stem.c_in

    @property
    def states(self) -> int:
        return self.head.filters

    def parameters(self) -> List[Parameter]:
        params = self.stem.parameters()
        if self.input_pe:
            params += self.input_pe.parameters()
        for block in self.blocks:
            params += block.parameters()
        return params + self.head.parameters()

    def _forward(self, x, mode, rng):
        if x.ndim != 4 or x.shape[3] != self.in_channels:
            got = x.shape[3] if x.ndim == 4 else x.shape
            raise ConfigurationError(f"model input has {got} channels, expected {self.in_channels}")
        if mode == "train" and rng is None and any(b.dropout_rate > 0 for b in self.blocks):
            raise ConfigurationError("train-mode forward with dropout needs an rng")
        h = conv2d_forward(x, self.stem)
        pe_cache = None
        if self.input_pe:
            h_pe, pe_cache = self.input_pe._forward(h, mode, rng)
        else:
            h_pe = h
        block_caches = []
        for block in self.blocks:
            h_pe, c = block._forward(h_pe, mode, rng)
            block_caches.append(c)
        out, head_cache = self.head._forward(h_pe, mode, rng)
        return out, (x, h, pe_cache, block_caches, head_cache)

    def _backward(self, cache, grad):
        x, h, pe_cache, block_caches, head_cache = cache
        g = self.head._backward(head_cache, grad)
        for block, c in zip(reversed(self.blocks), reversed(block_caches)):
            g = block._backward(c, g)
        if self.input_pe:
            g = self.input_pe._backward(pe_cache, g)
        return conv2d_backward(x, self.stem, g)


def pe_apply(pe: PositionEmbedding, features: Tensor) -> Tensor:
    return pe.forward(features)


def pacu_forward(layer: PACuLayer, features: Tensor) -> Tensor:
    return layer.forward(features)


def pac_forward(block: PACBlock, features: Tensor) -> Tensor:
    return block.forward(features)


def pasti_forward(block: PastiBlock, features: Tensor, mode: Mode = "eval",
                  rng: Optional[np.random.Generator] = None) -> Tensor:
    return block.forward(features, mode, rng)


def model_forward(model: PanModel, d_input: Tensor, mode: Mode = "eval",
                  rng: Optional[np.random.Generator] = None) -> Tensor:
    return model.forward(d_input, mode, rng)


def parameter_count(model: Layer) -> int:
    return sum(p.size for p in model.parameters())


def pasti_kinds(variant: str, model_cfg) -> List[Tuple[int, int, int, int]]:
    """(copies, depth, size, filters) per PAC kind for one PASTI of the given variant."""
    full = [
        (model_cfg.n0, *PAC_KINDS[0], model_cfg.c0),
        (model_cfg.n1, *PAC_KINDS[1], model_cfg.c1),
        (model_cfg.n2, *PAC_KINDS[2], model_cfg.c2),
    ]
    if variant != "one_pac":
        return [k for k in full if k[0] > 0]
    width = model_cfg.concat_width
    if width % model_cfg.c2:
        raise ConfigurationError(
            f"one_pac cannot match concat width {width} with PAC(2,3,{model_cfg.c2}) copies"
        )
    return [(width // model_cfg.c2, *PAC_KINDS[2], model_cfg.c2)]


def build_variant(kind: str, model_cfg, rows: int, cols: int, in_channels: int, states: int,
                  seed: int = 0) -> PanModel:
    """Construct a freshly initialised model. `model_cfg` is a run_config.ModelConfig."""
    if kind not in VARIANTS:
        raise ConfigurationError(f"unknown model variant '{kind}', expected one of {VARIANTS}")
    use_pe = kind != "no_pac"
    fusion = model_cfg.pe_fusion
    if model_cfg.input_pe and fusion == "concat":
        raise ConfigurationError("input_pe does not support concat fusion; it would widen the residual stream")
    rng = np.random.default_rng(seed)
    c_f = model_cfg.c_f
    kinds = pasti_kinds(kind, model_cfg)

    stem = ConvKernel("stem", in_channels, c_f, 1, rng)
    input_pe = PositionEmbedding("input_pe", rows, cols, c_f, fusion) if (use_pe and model_cfg.input_pe) else None
    blocks = [
        PastiBlock(f"block{b:02d}", rows, cols, c_f, kinds, model_cfg.dropout_rate, rng,
                   merge_init=model_cfg.merge_init, use_pe=use_pe, fusion=fusion)
        for b in range(model_cfg.pasti_count)
    ]
    head = PACuLayer("head", rows, cols, c_f, 1, states, rng, use_pe, fusion, init=model_cfg.head_init)
    if model_cfg.head_init == "zero":
        # keeps every head unit active at step 0
        head.conv.bias.value[...] = HEAD_BIAS
    model = PanModel(stem, blocks, head, variant=kind, input_pe=input_pe)
    logger.info(
        f"Built {kind} model: {len(blocks)} PASTI blocks, concat width "
        f"{blocks[0].concat_width if blocks else 0}, {parameter_count(model)} parameters"
    )
    return model


def loss(pred: Tensor, truth: Tensor) -> Tuple[float, Tensor]:
    """Mean over samples of sum|e|(1-d) + sum e^2, with e = pred - truth. Returns (value, dL/dpred)."""
    if pred.shape != truth.shape:
        raise ConfigurationError(f"prediction {pred.shape} and truth {truth.shape} are not congruent")
    if truth.size and (truth.min() < 0.0 or truth.max() > 1.0):
        raise DataError("truth lies outside the normalised [0, 1] range")
    n = pred.shape[0]
    err = pred - truth
    weight = 1.0 - truth
    value = (np.sum(np.abs(err) * weight) + np.sum(err * err)) / n
    grad = (np.sign(err) * weight + 2.0 * err) / n
    return float(value), grad


@dataclass
class TrainingTrace:
    variant: str = "full"
    epoch_losses: List[float] = field(default_factory=list)

    @property
    def final(self) -> Optional[float]:
        return self.epoch_losses[-1] if self.epoch_losses else None

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame({
            "epoch": np.arange(1, len(self.epoch_losses) + 1, dtype=np.int64),
            "mean_loss": np.asarray(self.epoch_losses, dtype=np.float64),
        })

    def to_csv(self, path: str) -> None:
        self.to_frame().to_csv(path, index=False, float_format="%.17g")


def train(model: PanModel, store: FrameStore, window: WindowConfig, targets: Sequence[int],
          train_cfg, rng: np.random.Generator) -> TrainingTrace:
    """Shuffled mini-batch Adam training. `train_cfg` is a run_config.TrainConfig.

    `targets` are input slots t; each sample predicts frame t + 1.
    """
    targets = np.asarray(list(targets), dtype=np.int64)
    if targets.size == 0:
        raise DataError("no valid training targets; the train split is shorter than the lookback window")
    optimizer = Adam(lr=train_cfg.learning_rate)
    params = model.parameters()
    trace = TrainingTrace(variant=model.variant)
    batch_size = train_cfg.batch_size

    for epoch in range(1, train_cfg.epochs + 1):
        order = targets[rng.permutation(targets.size)]
        total = 0.0
        for start in range(0, order.size, batch_size):
            batch = order[start:start + batch_size]
            x = materialize_batch(batch, window, store)
            truth = store.frames(batch + 1)
            model.zero_grad()
            pred = model.forward(x, "train", rng)
            value, grad = loss(pred, truth)
            if not np.isfinite(value):
                raise NumericalError(f"non-finite loss in epoch {epoch} for target slots {(batch + 1).tolist()}")
            model.backward(grad)
            optimizer.step(params)
            total += value * batch.size
        trace.epoch_losses.append(total / targets.size)
        logger.info(f"[{model.variant}] epoch {epoch}/{train_cfg.epochs} mean loss {trace.epoch_losses[-1]:.6g}")
    return trace


def predict(model: PanModel, store: FrameStore, window: WindowConfig, targets: Sequence[int],
            batch_size: int = 64, max_workers: int = 1) -> np.ndarray:
    """Eval-mode predictions (normalised) for frames t + 1, stacked in target order."""
    targets = list(targets)
    if not targets:
        rows, cols = store.grid_shape
        return np.zeros((0, rows, cols, model.states))
    batches = [targets[i:i + batch_size] for i in range(0, len(targets), batch_size)]

    def run(batch):
        return model.forward(materialize_batch(batch, window, store), "eval", record=False)

    if max_workers <= 1 or len(batches) == 1:
        outs = [run(b) for b in batches]
    else:
        with ThreadPoolExecutor(max_workers=max_workers) as executor:
            outs = list(executor.map(run, batches))
    return np.concatenate(outs, axis=0)
