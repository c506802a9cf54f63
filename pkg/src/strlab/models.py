"""CRNN and STAR-Net recognizers, the correction-BiLSTM plug-in, the
checkpoint format (magic "STRC1") and cross-model weight transfer.

Both models consume grayscale word images and emit per-frame class
log-probabilities of shape (25, N, C+1); class 0 is the CTC blank.
"""
from __future__ import annotations

import json
import os
import struct
from dataclasses import asdict, dataclass, field

import numpy as np

from . import nn
from . import tensor as T
from .errors import AlreadyAttached, ArchMismatch, BadConfig, BadMagic, HashMismatch, ShapeMismatch
from .nn import BatchNorm2d, BiLstm, Conv2d, Linear, MaxPool2d
from .tensor import Tensor
from .textcodec import Vocabulary

MAGIC = b"STRC1"


@dataclass(frozen=True)
class CrnnConfig:
    """Seven-conv VGG-style encoder ending in a 25-step, 256-dim feature
    sequence, decoded by a two-layer BiLSTM of hidden size 256."""

    input_hw: tuple = (32, 100)
    channels: tuple = (64, 128, 256, 256, 512, 512, 256)
    lstm_hidden: int = 256


@dataclass(frozen=True)
class StarNetConfig:
    """Affine spatial transformer (4-conv localizer) rectifying the raw
    input to 32x100, a 22-conv residual feature extractor emitting
    25 steps x 256 features, and a single-layer BiLSTM decoder."""

    input_hw: tuple = (18, 150)
    rectified_hw: tuple = (32, 100)
    loc_channels: tuple = (16, 32, 64, 128)
    loc_fc: int = 256
    stem_channels: int = 32
    # output channels per residual block (2 convs each); pools after the
    # stem and after blocks 3, 6 and 8 step the map down to 2x25
    block_channels: tuple = (32, 32, 64, 64, 64, 128, 128, 256, 256, 256)
    pool_after: tuple = ((3, (2, 2)), (6, (2, 1)), (8, (2, 1)))
    lstm_hidden: int = 256
    sampler_mode: str = "bilinear"


def _dtype_name(dt):
    return np.dtype(dt).name


class Model:
    """Common surface: forward to CTC log-posteriors, named tensors for
    checkpointing, train/eval mode switching."""

    kind = "?"

    def __init__(self, config, vocab: Vocabulary, dtype):
        if len(vocab) == 0:
            raise BadConfig("vocabulary is empty")
        self.config = config
        self.vocab = vocab
        self.dtype = np.dtype(dtype)
        self.correction = None  # (BiLstm, Linear) once attached

    # -- assembled by subclasses ------------------------------------------
    def _modules(self) -> dict:
        raise NotImplementedError

    def _features(self, x: Tensor) -> Tensor:
        """CNN feature sequence (T, N, F) before any recurrent decoding."""
        raise NotImplementedError

    def _decode(self, seq: Tensor) -> Tensor:
        raise NotImplementedError

    # -- shared ------------------------------------------------------------
    @property
    def n_classes(self) -> int:
        return len(self.vocab) + 1

    @property
    def feature_dim(self) -> int:
        """Width of the pre-projection CNN feature sequence."""
        if isinstance(self.config, CrnnConfig):
            return self.config.channels[-1]
        return 256

    def forward(self, images) -> Tensor:
        """images: (N, 1, H, W) array in [0, 1] -> log-probs (T, N, C+1)."""
        x = images if isinstance(images, Tensor) else Tensor(np.asarray(images, dtype=self.dtype))
        if x.data.ndim == 3:
            x = T.reshape(x, (x.shape[0], 1, x.shape[1], x.shape[2]))
        h, w = self.config.input_hw
        if x.data.ndim != 4 or x.shape[1] != 1 or x.shape[2:] != (h, w):
            raise ShapeMismatch(f"{self.kind} expects (N, 1, {h}, {w}), got {x.shape}")
        seq = self._features(x)
        if self.correction is not None:
            bilstm, head = self.correction
            logits = head(bilstm(seq))
        else:
            logits = self._decode(seq)
        return T.log_softmax(logits)

    def __call__(self, images):
        return self.forward(images)

    def parameters(self) -> dict:
        out = {}
        for name, mod in self._modules().items():
            for k, v in mod.params().items():
                out[f"{name}.{k}"] = v
        return out

    def buffers(self) -> dict:
        out = {}
        for name, mod in self._modules().items():
            if isinstance(mod, BatchNorm2d):
                for k, v in mod.buffers().items():
                    out[f"{name}.{k}"] = v
        return out

    def named_tensors(self) -> dict:
        out = {k: v.data for k, v in self.parameters().items()}
        out.update(self.buffers())
        return out

    def load_named_tensors(self, table: dict) -> None:
        params = self.parameters()
        bufs = {}
        for name, mod in self._modules().items():
            if isinstance(mod, BatchNorm2d):
                bufs[name] = mod
        for name, arr in table.items():
            if name in params:
                if params[name].data.shape != arr.shape:
                    raise ArchMismatch(f"tensor {name}: shape {arr.shape} vs {params[name].data.shape}")
                params[name].data = arr.astype(self.dtype, copy=True)
            else:
                mod_name, key = name.rsplit(".", 1)
                if mod_name not in bufs:
                    raise ArchMismatch(f"unknown tensor {name} in checkpoint")
                setattr(bufs[mod_name], key, arr.astype(self.dtype, copy=True))

    def zero_grad(self) -> None:
        for p in self.parameters().values():
            p.zero_grad()

    def set_training(self, flag: bool) -> None:
        for mod in self._modules().values():
            if isinstance(mod, BatchNorm2d):
                mod.training = flag

    def descriptor(self) -> dict:
        return {
            "kind": self.kind,
            "config": asdict(self.config),
            "dtype": _dtype_name(self.dtype),
            "vocab": self.vocab.codepoints,
            "vocab_hash": self.vocab.hash,
            "correction": self.correction is not None,
        }


class Crnn(Model):
    kind = "crnn"

    def __init__(self, config: CrnnConfig, vocab: Vocabulary, seed: int = 0, dtype=np.float32):
        super().__init__(config, vocab, dtype)
        if len(config.channels) != 7:
            raise BadConfig("CRNN needs exactly 7 conv layers")
        rng = np.random.default_rng(seed)
        ch = config.channels
        mk = lambda ci, co, k, p: Conv2d(ci, co, k, padding=p, rng=rng, dtype=dtype)
        self.convs = [
            mk(1, ch[0], (3, 3), (1, 1)),
            mk(ch[0], ch[1], (3, 3), (1, 1)),
            mk(ch[1], ch[2], (3, 3), (1, 1)),
            mk(ch[2], ch[3], (3, 3), (1, 1)),
            mk(ch[3], ch[4], (3, 3), (1, 1)),
            mk(ch[4], ch[5], (3, 3), (1, 1)),
            mk(ch[5], ch[6], (2, 1), (0, 0)),
        ]
        self.bn5 = BatchNorm2d(ch[4], dtype=dtype)
        self.bn6 = BatchNorm2d(ch[5], dtype=dtype)
        self.pools = {
            0: MaxPool2d((2, 2)),
            1: MaxPool2d((2, 2)),
            3: MaxPool2d((2, 1)),
            5: MaxPool2d((2, 1)),
        }
        hidden = config.lstm_hidden
        self.decoder1 = BiLstm(ch[6], hidden, rng=rng, dtype=dtype)
        self.decoder2 = BiLstm(2 * hidden, hidden, rng=rng, dtype=dtype)
        self.head = Linear(2 * hidden, self.n_classes, rng=rng, dtype=dtype)
        self._rng = rng

    def _modules(self):
        mods = {f"cnn.conv{i + 1}": c for i, c in enumerate(self.convs)}
        mods["cnn.bn5"] = self.bn5
        mods["cnn.bn6"] = self.bn6
        mods["decoder.l1"] = self.decoder1
        mods["decoder.l2"] = self.decoder2
        mods["head"] = self.head
        if self.correction is not None:
            mods["correction.bilstm"] = self.correction[0]
            mods["correction.head"] = self.correction[1]
        return mods

    def _features(self, x):
        for i, conv in enumerate(self.convs):
            x = conv(x)
            if i == 4:
                x = self.bn5(x)
            elif i == 5:
                x = self.bn6(x)
            x = T.relu(x)
            if i in self.pools:
                x = self.pools[i](x)
        n, c, h, w = x.shape
        if h != 1:
            raise BadConfig(f"CRNN feature map height {h} != 1; bad input/config pairing")
        x = T.reshape(x, (n, c, w))
        return T.transpose(x, (2, 0, 1))  # (T, N, C)

    def _decode(self, seq):
        return self.head(self.decoder2(self.decoder1(seq)))


class _ResBlock:
    """conv-bn-relu-conv-bn with additive skip (1x1 projection on channel
    change) and a trailing relu."""

    def __init__(self, in_ch, out_ch, *, rng, dtype):
        self.conv1 = Conv2d(in_ch, out_ch, (3, 3), padding=(1, 1), rng=rng, dtype=dtype)
        self.bn1 = BatchNorm2d(out_ch, dtype=dtype)
        self.conv2 = Conv2d(out_ch, out_ch, (3, 3), padding=(1, 1), rng=rng, dtype=dtype)
        self.bn2 = BatchNorm2d(out_ch, dtype=dtype)
        # Zero gamma on the closing norm: each block starts as the identity
        # (plus projection), so the deep stack optimizes like a shallow net
        # during the first steps.
        self.bn2.gamma.data[:] = 0.0
        self.proj = None if in_ch == out_ch else Conv2d(in_ch, out_ch, (1, 1), rng=rng, dtype=dtype)

    def modules(self, prefix):
        mods = {
            f"{prefix}.conv1": self.conv1,
            f"{prefix}.bn1": self.bn1,
            f"{prefix}.conv2": self.conv2,
            f"{prefix}.bn2": self.bn2,
        }
        if self.proj is not None:
            mods[f"{prefix}.proj"] = self.proj
        return mods

    def forward(self, x):
        path = self.bn2(self.conv2(T.relu(self.bn1(self.conv1(x)))))
        skip = x if self.proj is None else self.proj(x)
        return T.relu(T.add(path, skip))


class StarNet(Model):
    kind = "starnet"

    def __init__(self, config: StarNetConfig, vocab: Vocabulary, seed: int = 0, dtype=np.float32):
        super().__init__(config, vocab, dtype)
        rng = np.random.default_rng(seed)
        # localizer: conv(3,1,1)+pool(2,2) per stage, then FC->256->FC->6
        self.loc_convs = []
        ci = 1
        for co in config.loc_channels:
            self.loc_convs.append(Conv2d(ci, co, (3, 3), padding=(1, 1), rng=rng, dtype=dtype))
            ci = co
        self.loc_pool = MaxPool2d((2, 2))
        h, w = config.input_hw
        for _ in config.loc_channels:
            h, w = h // 2, w // 2
        if h < 1 or w < 1:
            raise BadConfig("localizer pools below 1 pixel; input too small")
        self.loc_fc1 = Linear(ci * h * w, config.loc_fc, rng=rng, dtype=dtype)
        self.loc_fc2 = Linear(config.loc_fc, 6, rng=rng, dtype=dtype, zero_init=True)
        self.loc_fc2.bias.data = nn.IDENTITY_THETA.astype(dtype).copy()

        self.stem = Conv2d(1, config.stem_channels, (3, 3), padding=(1, 1), rng=rng, dtype=dtype)
        self.stem_bn = BatchNorm2d(config.stem_channels, dtype=dtype)
        self.stem_pool = MaxPool2d((2, 2))
        self.blocks = []
        ci = config.stem_channels
        for co in config.block_channels:
            self.blocks.append(_ResBlock(ci, co, rng=rng, dtype=dtype))
            ci = co
        self.block_pools = {idx - 1: MaxPool2d(win) for idx, win in config.pool_after}
        self.final = Conv2d(ci, 256, (2, 1), rng=rng, dtype=dtype)
        self.final_bn = BatchNorm2d(256, dtype=dtype)
        self.decoder = BiLstm(256, config.lstm_hidden, rng=rng, dtype=dtype)
        self.head = Linear(2 * config.lstm_hidden, self.n_classes, rng=rng, dtype=dtype)
        self._rng = rng

    def _modules(self):
        mods = {f"loc.conv{i + 1}": c for i, c in enumerate(self.loc_convs)}
        mods["loc.fc1"] = self.loc_fc1
        mods["loc.fc2"] = self.loc_fc2
        mods["fx.stem"] = self.stem
        mods["fx.stem_bn"] = self.stem_bn
        for i, b in enumerate(self.blocks):
            mods.update(b.modules(f"fx.block{i + 1}"))
        mods["fx.final"] = self.final
        mods["fx.final_bn"] = self.final_bn
        mods["decoder.l1"] = self.decoder
        mods["head"] = self.head
        if self.correction is not None:
            mods["correction.bilstm"] = self.correction[0]
            mods["correction.head"] = self.correction[1]
        return mods

    def localize(self, x: Tensor) -> Tensor:
        """Predict per-item affine params (N, 6); identity at init."""
        h = x
        for conv in self.loc_convs:
            h = self.loc_pool(T.relu(conv(h)))
        n = h.shape[0]
        h = T.reshape(h, (n, -1))
        return self.loc_fc2(T.relu(self.loc_fc1(h)))

    def rectify(self, x: Tensor) -> Tensor:
        theta = self.localize(x)
        return nn.affine_grid_sample(x, theta, self.config.rectified_hw, self.config.sampler_mode)

    def _features(self, x):
        x = self.rectify(x)
        x = self.stem_pool(T.relu(self.stem_bn(self.stem(x))))
        for i, block in enumerate(self.blocks):
            x = block.forward(x)
            if i in self.block_pools:
                x = self.block_pools[i](x)
        x = T.relu(self.final_bn(self.final(x)))
        n, c, h, w = x.shape
        if h != 1:
            raise BadConfig(f"STAR-Net feature map height {h} != 1; bad input/config pairing")
        x = T.reshape(x, (n, c, w))
        return T.transpose(x, (2, 0, 1))

    def _decode(self, seq):
        return self.head(self.decoder(seq))


def build_crnn(config: CrnnConfig, vocab: Vocabulary, seed: int = 0, dtype=np.float32) -> Crnn:
    return Crnn(config, vocab, seed=seed, dtype=dtype)


def build_starnet(config: StarNetConfig, vocab: Vocabulary, seed: int = 0, dtype=np.float32) -> StarNet:
    return StarNet(config, vocab, seed=seed, dtype=dtype)


def attach_correction_bilstm(model: Model, seed: int = 0) -> Model:
    """Replace the decoding head with a fresh 1-layer BiLSTM (hidden 256)
    over the 256-dim CNN feature sequence plus a new class projection.
    Prior weights stay in the model; the whole graph remains trainable."""
    if model.correction is not None:
        raise AlreadyAttached("correction BiLSTM already attached")
    rng = np.random.default_rng(seed)
    hidden = 256
    bilstm = BiLstm(model.feature_dim, hidden, rng=rng, dtype=model.dtype)
    head = Linear(2 * hidden, model.n_classes, rng=rng, dtype=model.dtype)
    model.correction = (bilstm, head)
    return model


# ---------------------------------------------------------------------------
# checkpoints


def checkpoint_bytes(model: Model) -> bytes:
    """Serialize: magic, u32 header length, JSON descriptor + tensor table,
    then the little-endian payload."""
    table = model.named_tensors()
    entries = []
    payload = bytearray()
    for name in sorted(table):
        arr = np.ascontiguousarray(table[name])
        le = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
        entries.append(
            {
                "name": name,
                "dtype": _dtype_name(arr.dtype),
                "shape": list(arr.shape),
                "offset": len(payload),
                "nbytes": le.nbytes,
            }
        )
        payload.extend(le.tobytes())
    header = dict(model.descriptor())
    header["tensors"] = entries
    blob = json.dumps(header, ensure_ascii=False, sort_keys=True).encode("utf-8")
    return MAGIC + struct.pack("<I", len(blob)) + blob + bytes(payload)


def save(model: Model, path) -> None:
    with open(path, "wb") as f:
        f.write(checkpoint_bytes(model))


def _parse_checkpoint(raw: bytes):
    if len(raw) < len(MAGIC) + 4 or raw[: len(MAGIC)] != MAGIC:
        raise BadMagic("not a STRC1 checkpoint")
    (hlen,) = struct.unpack("<I", raw[len(MAGIC) : len(MAGIC) + 4])
    start = len(MAGIC) + 4
    if len(raw) < start + hlen:
        raise BadMagic("truncated checkpoint header")
    try:
        header = json.loads(raw[start : start + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise BadMagic(f"corrupt checkpoint header: {e}") from e
    payload = raw[start + hlen :]
    table = {}
    for ent in header["tensors"]:
        dt = np.dtype(ent["dtype"]).newbyteorder("<")
        end = ent["offset"] + ent["nbytes"]
        if end > len(payload):
            raise BadMagic("truncated checkpoint payload")
        arr = np.frombuffer(payload, dtype=dt, count=int(np.prod(ent["shape"], dtype=int)), offset=ent["offset"])
        table[ent["name"]] = arr.reshape(ent["shape"]).astype(ent["dtype"])
    return header, table


def model_from_checkpoint(raw: bytes, vocab: Vocabulary | None = None) -> Model:
    header, table = _parse_checkpoint(raw)
    ckpt_vocab = Vocabulary(header["vocab"])
    if ckpt_vocab.hash != header["vocab_hash"]:
        raise HashMismatch("descriptor vocab hash does not match its codepoint list")
    if vocab is not None and vocab.hash != header["vocab_hash"]:
        raise HashMismatch("supplied vocabulary does not match checkpoint")
    cfgd = header["config"]
    dtype = np.dtype(header["dtype"])
    if header["kind"] == "crnn":
        cfg = CrnnConfig(
            input_hw=tuple(cfgd["input_hw"]), channels=tuple(cfgd["channels"]), lstm_hidden=cfgd["lstm_hidden"]
        )
        model = Crnn(cfg, ckpt_vocab, dtype=dtype)
    elif header["kind"] == "starnet":
        cfg = StarNetConfig(
            input_hw=tuple(cfgd["input_hw"]),
            rectified_hw=tuple(cfgd["rectified_hw"]),
            loc_channels=tuple(cfgd["loc_channels"]),
            loc_fc=cfgd["loc_fc"],
            stem_channels=cfgd["stem_channels"],
            block_channels=tuple(cfgd["block_channels"]),
            pool_after=tuple((i, tuple(w)) for i, w in cfgd["pool_after"]),
            lstm_hidden=cfgd["lstm_hidden"],
            sampler_mode=cfgd["sampler_mode"],
        )
        model = StarNet(cfg, ckpt_vocab, dtype=dtype)
    else:
        raise BadMagic(f"unknown model kind {header['kind']!r}")
    if header.get("correction"):
        attach_correction_bilstm(model)
    expected = set(model.named_tensors())
    got = set(table)
    if expected != got:
        raise ArchMismatch(
            f"checkpoint tensor set mismatch: missing {sorted(expected - got)}, extra {sorted(got - expected)}"
        )
    model.load_named_tensors(table)
    return model


def load(path, vocab: Vocabulary | None = None) -> Model:
    if not os.path.exists(path):
        raise IOError(f"checkpoint not found: {path}")
    with open(path, "rb") as f:
        raw = f.read()
    return model_from_checkpoint(raw, vocab)


@dataclass
class TransferReport:
    copied: list = field(default_factory=list)
    reinitialized: list = field(default_factory=list)


def transfer_weights(src: Model, dst_model: Model) -> TransferReport:
    """Copy every shape-compatible tensor from src into dst (all-layers
    policy). The class-projection head keeps dst's fresh initialization when
    the vocabularies differ."""
    if src.kind != dst_model.kind:
        raise ArchMismatch(f"cannot transfer {src.kind} weights into {dst_model.kind}")
    if asdict(src.config) != asdict(dst_model.config):
        raise ArchMismatch("architecture configs differ")
    same_vocab = src.vocab.hash == dst_model.vocab.hash
    src_table = src.named_tensors()
    report = TransferReport()
    copy = {}
    for name, v in dst_model.named_tensors().items():
        is_head = name.startswith("head.") or name.startswith("correction.head.")
        if name in src_table and (same_vocab or not is_head) and src_table[name].shape == v.shape:
            copy[name] = src_table[name]
            report.copied.append(name)
        else:
            report.reinitialized.append(name)
    dst_model.load_named_tensors(copy)
    return report


def dump_first_layer_filters(model: Model, out_dir) -> list:
    """Debug dump of first-conv filters as PGM images."""
    from .synthgen import write_pgm

    conv = model.convs[0] if isinstance(model, Crnn) else model.stem
    os.makedirs(out_dir, exist_ok=True)
    paths = []
    w = conv.weight.data
    for i in range(w.shape[0]):
        f = w[i, 0]
        rng = f.max() - f.min()
        img = (f - f.min()) / rng if rng > 0 else np.zeros_like(f)
        p = os.path.join(out_dir, f"filter_{i:03d}.pgm")
        write_pgm(p, img)
        paths.append(p)
    return paths
