"""Grid-conditioned causal transformer for story generation.

One causal stream: encoded image tokens, then character/object tokens, then
(optionally) a single token carrying the flattened similarity grid, then
[BOS] and the story. Every position gets a learned absolute position
embedding and one of four segment embeddings (image/character/grid/text).
Pre-LN GPT-2 style blocks; loss is masked cross-entropy on story positions.
"""

from __future__ import annotations

import io
import math
import struct
import zlib
from dataclasses import dataclass, field, replace

import numpy as np

from . import numerics as nm
from .chargrid import flatten_pad, grid_for_mode
from .corpus import ImageSequenceRecord
from .errors import ConfigError, DataError, NumericError
from .numerics import ParamStore, Tensor

GRID_MODES = ("none", "char", "obj", "entity")
FEATURES = ("global", "char", "obj")
SEG_IMAGE, SEG_CHAR, SEG_GRID, SEG_TEXT = 0, 1, 2, 3

CHECKPOINT_MAGIC = b"VWPCKPT1"


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int
    feat_dim: int
    d_model: int = 128
    n_layers: int = 2
    n_heads: int = 4
    d_ff: int = 0  # 0 means 4 * d_model
    t_max: int = 256
    n_max: int = 10
    m_max: int = 5
    o_max: int = 20
    feature_set: tuple[str, ...] = ("global",)
    grid_mode: str = "none"
    dropout: float = 0.1
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "feature_set", tuple(sorted(set(self.feature_set))))
        if self.d_ff == 0:
            object.__setattr__(self, "d_ff", 4 * self.d_model)
        if self.d_model % self.n_heads != 0:
            raise ConfigError(f"d_model {self.d_model} not divisible by n_heads {self.n_heads}")
        if "global" not in self.feature_set:
            raise ConfigError("feature_set must include 'global'")
        for feat in self.feature_set:
            if feat not in FEATURES:
                raise ConfigError(f"unknown feature {feat!r}")
        if self.grid_mode not in GRID_MODES:
            raise ConfigError(f"unknown grid_mode {self.grid_mode!r}")
        needs = {"char": ("char",), "obj": ("obj",), "entity": ("char", "obj")}.get(self.grid_mode, ())
        for feat in needs:
            if feat not in self.feature_set:
                raise ConfigError(f"grid_mode {self.grid_mode!r} requires feature {feat!r}")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"dropout {self.dropout} outside [0, 1)")
        for name in ("vocab_size", "feat_dim", "d_model", "n_layers", "n_heads",
                     "t_max", "n_max", "m_max", "o_max"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")

    @property
    def grid_len(self) -> int:
        return self.n_max * self.m_max

    @property
    def n_positions(self) -> int:
        # fixed across variants: frame capacity + grid slot + [BOS] + text budget
        return self.n_max + self.m_max + self.o_max + 2 + self.t_max

    def canonical_text(self) -> str:
        fields = {
            "d_ff": self.d_ff, "d_model": self.d_model, "dropout": repr(self.dropout),
            "feat_dim": self.feat_dim, "feature_set": ",".join(self.feature_set),
            "grid_mode": self.grid_mode, "m_max": self.m_max, "n_heads": self.n_heads,
            "n_layers": self.n_layers, "n_max": self.n_max, "o_max": self.o_max,
            "seed": self.seed, "t_max": self.t_max, "vocab_size": self.vocab_size,
        }
        return "".join(f"{k}={fields[k]}\n" for k in sorted(fields))

    @classmethod
    def from_canonical_text(cls, text: str) -> "ModelConfig":
        raw: dict[str, str] = {}
        for line in text.splitlines():
            if line.strip():
                key, _, value = line.partition("=")
                raw[key] = value
        try:
            return cls(
                vocab_size=int(raw["vocab_size"]), feat_dim=int(raw["feat_dim"]),
                d_model=int(raw["d_model"]), n_layers=int(raw["n_layers"]),
                n_heads=int(raw["n_heads"]), d_ff=int(raw["d_ff"]),
                t_max=int(raw["t_max"]), n_max=int(raw["n_max"]),
                m_max=int(raw["m_max"]), o_max=int(raw["o_max"]),
                feature_set=tuple(raw["feature_set"].split(",")),
                grid_mode=raw["grid_mode"], dropout=float(raw["dropout"]),
                seed=int(raw["seed"]),
            )
        except KeyError as exc:
            raise DataError(f"checkpoint config missing field {exc}") from exc


@dataclass
class StoryGenModel:
    config: ModelConfig
    store: ParamStore

    def param(self, name: str) -> Tensor:
        return self.store[name]


def _param_spec(config: ModelConfig) -> list[tuple[str, tuple[int, ...], str]]:
    """(name, shape, init kind) for every parameter, in a fixed order."""
    d, dff = config.d_model, config.d_ff
    spec: list[tuple[str, tuple[int, ...], str]] = [
        ("enc_global.w", (config.feat_dim, d), "normal"),
        ("enc_global.b", (d,), "zeros"),
    ]
    if "char" in config.feature_set or "obj" in config.feature_set:
        spec += [("enc_entity.w", (config.feat_dim, d), "normal"),
                 ("enc_entity.b", (d,), "zeros")]
    if config.grid_mode != "none":
        spec += [("enc_grid.w", (config.grid_len, d), "normal"),
                 ("enc_grid.b", (d,), "zeros")]
    spec += [
        ("tok_emb", (config.vocab_size, d), "normal"),
        ("pos_emb", (config.n_positions, d), "normal"),
        ("seg_emb", (4, d), "normal"),
    ]
    for i in range(config.n_layers):
        p = f"block{i}."
        spec += [
            (p + "ln1.g", (d,), "ones"), (p + "ln1.b", (d,), "zeros"),
            (p + "attn.wq", (d, d), "normal"), (p + "attn.bq", (d,), "zeros"),
            (p + "attn.wk", (d, d), "normal"), (p + "attn.bk", (d,), "zeros"),
            (p + "attn.wv", (d, d), "normal"), (p + "attn.bv", (d,), "zeros"),
            (p + "attn.wo", (d, d), "normal"), (p + "attn.bo", (d,), "zeros"),
            (p + "ln2.g", (d,), "ones"), (p + "ln2.b", (d,), "zeros"),
            (p + "mlp.w1", (d, dff), "normal"), (p + "mlp.b1", (dff,), "zeros"),
            (p + "mlp.w2", (dff, d), "normal"), (p + "mlp.b2", (d,), "zeros"),
        ]
    spec += [
        ("ln_f.g", (d,), "ones"), ("ln_f.b", (d,), "zeros"),
        ("out.w", (d, config.vocab_size), "normal"), ("out.b", (config.vocab_size,), "zeros"),
    ]
    return spec


def build_model(config: ModelConfig) -> StoryGenModel:
    """Seed-deterministic initialization: normal(0, 0.02) weights, zero
    biases, unit layer-norm gains. Each parameter draws from an rng keyed on
    (seed, name), so shared parameters initialize identically across
    variants with the same seed."""
    store = ParamStore()
    for name, shape, kind in _param_spec(config):
        if kind == "normal":
            rng = np.random.default_rng(
                np.random.SeedSequence((config.seed, zlib.crc32(name.encode()))))
            data = rng.normal(0.0, 0.02, size=shape)
        elif kind == "ones":
            data = np.ones(shape)
        else:
            data = np.zeros(shape)
        store.add(name, data)
    return StoryGenModel(config=config, store=store)


def parameter_count(config: ModelConfig) -> int:
    return sum(int(np.prod(shape)) for _, shape, _ in _param_spec(config))


@dataclass
class InputLayout:
    """A model-ready arrangement of one sequence and one story."""
    image_feats: np.ndarray            # (N, D)
    entity_feats: np.ndarray | None    # (M_char + M_obj, D) or None
    grid_vec: np.ndarray | None        # (n_max * m_max,) or None
    token_ids: np.ndarray              # [BOS] + story
    positions: np.ndarray
    segments: np.ndarray
    targets: np.ndarray                # next-token ids, -1 where unused
    loss_mask: np.ndarray              # True exactly on story-prediction slots
    prefix_len: int                    # positions before [BOS]

    @property
    def length(self) -> int:
        return int(self.positions.shape[0])


def assemble_input(seq: ImageSequenceRecord, story_tokens: list[int],
                   config: ModelConfig, bos_id: int) -> InputLayout:
    """Layout = images ++ characters/objects ++ grid? ++ [BOS] ++ story."""
    n_img = len(seq.images)
    if n_img > config.n_max:
        raise DataError(f"sequence {seq.id}: {n_img} images exceed n_max {config.n_max}")
    if len(story_tokens) > config.t_max:
        raise DataError(f"sequence {seq.id}: story length {len(story_tokens)} exceeds t_max {config.t_max}")
    image_feats = np.stack([im.global_feat for im in seq.images])

    entity_rows = []
    if "char" in config.feature_set:
        if len(seq.characters) > config.m_max:
            raise DataError(f"sequence {seq.id}: {len(seq.characters)} characters exceed m_max {config.m_max}")
        entity_rows += [ch.representative_feat for ch in seq.characters]
    if "obj" in config.feature_set:
        if len(seq.objects) > config.o_max:
            raise DataError(f"sequence {seq.id}: {len(seq.objects)} objects exceed o_max {config.o_max}")
        entity_rows += [ob.feat for ob in seq.objects]
    entity_feats = np.stack(entity_rows) if entity_rows else None

    grid_vec = None
    if config.grid_mode != "none":
        grid = grid_for_mode(seq, config.grid_mode, config.n_max, config.m_max)
        grid_vec = flatten_pad(grid, config.n_max, config.m_max)

    n_entity = 0 if entity_feats is None else entity_feats.shape[0]
    n_grid = 0 if grid_vec is None else 1
    prefix_len = n_img + n_entity + n_grid
    length = prefix_len + 1 + len(story_tokens)

    segments = np.concatenate([
        np.full(n_img, SEG_IMAGE),
        np.full(n_entity, SEG_CHAR),
        np.full(n_grid, SEG_GRID),
        np.full(1 + len(story_tokens), SEG_TEXT),
    ]).astype(np.intp)
    positions = np.arange(length, dtype=np.intp)
    token_ids = np.array([bos_id] + list(story_tokens), dtype=np.intp)

    targets = np.full(length, -1, dtype=np.intp)
    loss_mask = np.zeros(length, dtype=bool)
    for k, tok in enumerate(story_tokens):
        pos = prefix_len + k  # [BOS] and earlier story tokens predict the next one
        targets[pos] = tok
        loss_mask[pos] = True
    return InputLayout(image_feats=image_feats, entity_feats=entity_feats,
                       grid_vec=grid_vec, token_ids=token_ids, positions=positions,
                       segments=segments, targets=targets, loss_mask=loss_mask,
                       prefix_len=prefix_len)


def _linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    return nm.add(nm.matmul(x, w), b)


def _causal_mask(length: int) -> Tensor:
    mask = np.triu(np.full((length, length), -1e30), k=1)
    return Tensor(mask)


def forward_logits(model: StoryGenModel, layout: InputLayout, *,
                   training: bool = False,
                   rng: np.random.Generator | None = None) -> Tensor:
    """Logits (length x vocab) under full causal self-attention."""
    cfg = model.config
    p = model.param
    if training and rng is None:
        rng = np.random.default_rng(0)

    parts = [_linear(Tensor(layout.image_feats), p("enc_global.w"), p("enc_global.b"))]
    if layout.entity_feats is not None:
        parts.append(_linear(Tensor(layout.entity_feats), p("enc_entity.w"), p("enc_entity.b")))
    if layout.grid_vec is not None:
        parts.append(_linear(Tensor(layout.grid_vec[None, :]), p("enc_grid.w"), p("enc_grid.b")))
    parts.append(nm.embedding(p("tok_emb"), layout.token_ids))

    x = nm.concat_rows(parts)
    x = nm.add(x, nm.embedding(p("pos_emb"), layout.positions))
    x = nm.add(x, nm.embedding(p("seg_emb"), layout.segments))
    x = nm.dropout(x, cfg.dropout, rng, training)

    length = layout.length
    mask = _causal_mask(length)
    head_dim = cfg.d_model // cfg.n_heads
    scale = Tensor(1.0 / math.sqrt(head_dim))
    for i in range(cfg.n_layers):
        b = f"block{i}."
        h = nm.layer_norm(x, p(b + "ln1.g"), p(b + "ln1.b"))
        q = _linear(h, p(b + "attn.wq"), p(b + "attn.bq"))
        k = _linear(h, p(b + "attn.wk"), p(b + "attn.bk"))
        v = _linear(h, p(b + "attn.wv"), p(b + "attn.bv"))
        heads = []
        for head in range(cfg.n_heads):
            lo, hi = head * head_dim, (head + 1) * head_dim
            scores = nm.mul(nm.matmul(nm.narrow_cols(q, lo, hi),
                                      nm.transpose(nm.narrow_cols(k, lo, hi))), scale)
            attn = nm.softmax(nm.add(scores, mask))
            attn = nm.dropout(attn, cfg.dropout, rng, training)
            heads.append(nm.matmul(attn, nm.narrow_cols(v, lo, hi)))
        attn_out = _linear(nm.concat_cols(heads), p(b + "attn.wo"), p(b + "attn.bo"))
        x = nm.add(x, nm.dropout(attn_out, cfg.dropout, rng, training))

        h = nm.layer_norm(x, p(b + "ln2.g"), p(b + "ln2.b"))
        inner = nm.gelu(_linear(h, p(b + "mlp.w1"), p(b + "mlp.b1")))
        mlp_out = _linear(inner, p(b + "mlp.w2"), p(b + "mlp.b2"))
        x = nm.add(x, nm.dropout(mlp_out, cfg.dropout, rng, training))

    x = nm.layer_norm(x, p("ln_f.g"), p("ln_f.b"))
    logits = _linear(x, p("out.w"), p("out.b"))
    if not np.isfinite(logits.data).all():
        raise NumericError("forward_logits: non-finite activation")
    return logits


def story_loss(model: StoryGenModel, seq: ImageSequenceRecord, story_tokens: list[int],
               bos_id: int, *, training: bool = False,
               rng: np.random.Generator | None = None) -> Tensor:
    """Masked cross-entropy over story positions (targets shifted by one)."""
    if not story_tokens:
        raise DataError(f"sequence {seq.id}: empty story has no loss positions")
    layout = assemble_input(seq, story_tokens, model.config, bos_id)
    logits = forward_logits(model, layout, training=training, rng=rng)
    return nm.cross_entropy_masked(logits, layout.targets, layout.loss_mask)


# --- checkpoint io ------------------------------------------------------------

def save_checkpoint(model: StoryGenModel, path) -> None:
    """Magic, length-prefixed canonical config text, then sorted named
    parameters as (u32 name length, name, u32 rank, u32 extents, <f8 data)."""
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    config_blob = model.config.canonical_text().encode("utf-8")
    buf.write(struct.pack("<I", len(config_blob)))
    buf.write(config_blob)
    for name in sorted(model.store.names()):
        blob = name.encode("utf-8")
        data = model.store[name].data
        buf.write(struct.pack("<I", len(blob)))
        buf.write(blob)
        buf.write(struct.pack("<I", data.ndim))
        for extent in data.shape:
            buf.write(struct.pack("<I", extent))
        buf.write(np.ascontiguousarray(data, dtype="<f8").tobytes())
    with open(path, "wb") as fh:
        fh.write(buf.getvalue())


def load_checkpoint(path) -> StoryGenModel:
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:8] != CHECKPOINT_MAGIC:
        raise DataError(f"{path}: not a checkpoint (bad magic)")
    view = io.BytesIO(raw[8:])

    def read_u32() -> int:
        blob = view.read(4)
        if len(blob) != 4:
            raise DataError(f"{path}: truncated checkpoint")
        return struct.unpack("<I", blob)[0]

    config = ModelConfig.from_canonical_text(view.read(read_u32()).decode("utf-8"))
    params: dict[str, np.ndarray] = {}
    while True:
        head = view.read(4)
        if not head:
            break
        name_len = struct.unpack("<I", head)[0]
        name = view.read(name_len).decode("utf-8")
        rank = read_u32()
        shape = tuple(read_u32() for _ in range(rank))
        count = int(np.prod(shape)) if shape else 1
        payload = view.read(count * 8)
        if len(payload) != count * 8:
            raise DataError(f"{path}: truncated payload for {name!r}")
        params[name] = np.frombuffer(payload, dtype="<f8").reshape(shape).copy()

    expected = {name: shape for name, shape, _ in _param_spec(config)}
    if set(params) != set(expected):
        missing = sorted(set(expected) - set(params))
        extra = sorted(set(params) - set(expected))
        raise DataError(f"{path}: parameter set mismatch (missing {missing}, extra {extra})")
    store = ParamStore()
    for name, _, _ in _param_spec(config):
        if params[name].shape != expected[name]:
            raise DataError(f"{path}: {name} has shape {params[name].shape}, expected {expected[name]}")
        store.add(name, params[name])
    return StoryGenModel(config=config, store=store)


def sibling_config(config: ModelConfig, grid_mode: str) -> ModelConfig:
    """Same config with a different grid wiring (for variant comparisons)."""
    return replace(config, grid_mode=grid_mode)
