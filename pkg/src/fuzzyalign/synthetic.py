"""Seeded tri-modal synthetic world with partially missing aerial cues.

Each identity owns a bank of attribute vectors drawn from a shared pool plus
a private component; its prototype is the normalised sum of both. Text and
ground samples see the whole prototype with small noise. Aerial samples are
shrunk by a random altitude factor, lose each attribute with probability
``token_dropout_prob`` (the lost token is replaced by pure noise and the cue
is missing from the aerial global feature too), and carry heavier noise
confined to a fixed low-rank "view" subspace shared by all aerial samples.

Every array is rounded to float32 precision so a world read back from disk is
identical to the in-memory one.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .config import ScenarioConfig
from .errors import CorruptFile
from .io import atomic_write_text, read_embeddings, write_embeddings


def _unit(x):
    return x / np.linalg.norm(x, axis=-1, keepdims=True)


def _f32(x):
    return np.asarray(x, dtype=np.float32).astype(np.float64)


@dataclass
class Modality:
    """Samples of one modality: global features, optional tokens, identity ids."""

    features: np.ndarray
    ids: np.ndarray
    tokens: np.ndarray | None = None


@dataclass
class SyntheticWorld:
    config: ScenarioConfig
    prototypes: np.ndarray
    attribute_pool: np.ndarray
    attribute_index: np.ndarray
    text: Modality
    aerial: Modality
    ground: Modality | None
    visibility: np.ndarray  # aerial samples x attributes, True = cue present
    altitude: np.ndarray
    train_ids: np.ndarray
    test_ids: np.ndarray

    @property
    def dim(self):
        return self.prototypes.shape[1]

    def dropout_fraction(self):
        """Per-aerial-sample fraction of dropped attribute tokens."""
        if self.visibility.shape[1] == 0:
            return np.zeros(self.visibility.shape[0])
        return 1.0 - self.visibility.mean(axis=1)


def _noise(rng, shape, scale):
    # per-component std scale/sqrt(D), so the noise norm is about ``scale``
    return rng.normal(0.0, 1.0, size=shape) * (scale / np.sqrt(shape[-1]))


def generate(config: ScenarioConfig) -> SyntheticWorld:
    config.validate()
    rng = np.random.default_rng(config.seed)
    n_id, d = config.num_identities, config.dim
    n_attr = config.tokens_per_sample - 1

    pool = _unit(rng.normal(size=(config.attribute_pool_size, d)))
    if n_attr <= config.attribute_pool_size:
        attr_idx = np.stack([rng.choice(config.attribute_pool_size, n_attr, replace=False)
                             for _ in range(n_id)]).reshape(n_id, n_attr)
    else:
        attr_idx = rng.integers(0, config.attribute_pool_size, size=(n_id, n_attr))
    private = _unit(rng.normal(size=(n_id, d)))
    attrs = pool[attr_idx]  # n_id x n_attr x d
    attr_scale = 1.0 / np.sqrt(max(n_attr, 1))
    # marginally uniform on the sphere: private part and pool are rotation invariant
    prototypes = _unit(private + attrs.sum(axis=1) * attr_scale)

    def clean_modality(per_id, noise_scale, with_tokens):
        ids = np.repeat(np.arange(n_id), per_id)
        feats = _unit(prototypes[ids] + _noise(rng, (ids.size, d), noise_scale))
        tokens = None
        if with_tokens:
            attr_tok = _unit(attrs[ids] + _noise(rng, (ids.size, n_attr, d), config.token_noise_scale))
            tokens = np.concatenate([feats[:, None, :], attr_tok], axis=1)
        return Modality(_f32(feats), ids, None if tokens is None else _f32(tokens))

    text = clean_modality(config.text_per_identity, config.text_noise_scale, True)
    ground = clean_modality(config.ground_per_identity, config.ground_noise_scale, False)

    if config.view_rank:
        view_basis = np.linalg.qr(rng.normal(size=(d, config.view_rank)))[0]  # d x r

        def aerial_noise(shape, scale):
            z = rng.normal(0.0, 1.0, size=(*shape[:-1], config.view_rank))
            return (z @ view_basis.T) * (scale / np.sqrt(config.view_rank))
    else:
        def aerial_noise(shape, scale):
            return _noise(rng, shape, scale)

    a_ids = np.repeat(np.arange(n_id), config.aerial_per_identity)
    n_a = a_ids.size
    altitude = rng.uniform(1.0 - config.altitude_spread, 1.0, size=n_a)
    visible = rng.random((n_a, n_attr)) >= config.token_dropout_prob
    informative = private[a_ids] + (attrs[a_ids] * visible[..., None]).sum(axis=1) * attr_scale
    a_feats = _unit(altitude[:, None] * informative + aerial_noise((n_a, d), config.aerial_noise_scale))
    kept = _unit(altitude[:, None, None] * attrs[a_ids]
                 + _noise(rng, (n_a, n_attr, d), config.token_noise_scale))
    junk = _unit(rng.normal(size=(n_a, n_attr, d)))
    a_tok = np.where(visible[..., None], kept, junk)
    aerial = Modality(_f32(a_feats), a_ids, _f32(np.concatenate([a_feats[:, None, :], a_tok], axis=1)))

    perm = rng.permutation(n_id)
    n_test = max(2, int(round(config.test_fraction * n_id)))
    test_ids, train_ids = np.sort(perm[:n_test]), np.sort(perm[n_test:])

    return SyntheticWorld(
        config=config,
        prototypes=_f32(prototypes),
        attribute_pool=_f32(pool),
        attribute_index=attr_idx,
        text=text,
        aerial=aerial,
        ground=ground if config.include_ground else None,
        visibility=visible,
        altitude=_f32(altitude),
        train_ids=train_ids,
        test_ids=test_ids,
    )


# on-disk layout ---------------------------------------------------------

def _token_rows(tokens):
    return tokens.reshape(-1, tokens.shape[-1])


def save_world(world: SyntheticWorld, out_dir, extra_manifest=None):
    """Write embedding files plus ``world.json``; returns the manifest dict."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    files = {
        "text.emb": (world.text.features, world.text.ids),
        "text_tokens.emb": (_token_rows(world.text.tokens), None),
        "aerial.emb": (world.aerial.features, world.aerial.ids),
        "aerial_tokens.emb": (_token_rows(world.aerial.tokens), None),
        "prototypes.emb": (world.prototypes, np.arange(world.prototypes.shape[0])),
        "attribute_pool.emb": (world.attribute_pool, None),
    }
    if world.ground is not None:
        files["ground.emb"] = (world.ground.features, world.ground.ids)
    for name, (data, ids) in files.items():
        write_embeddings(out / name, data, ids)
    # aux arrays, stored as one float row per sample
    write_embeddings(out / "aerial_visibility.emb", world.visibility.astype(np.float32))
    write_embeddings(out / "aerial_altitude.emb", world.altitude.reshape(-1, 1))
    state = {
        "scenario": asdict(world.config),
        "tokens_per_sample": world.config.tokens_per_sample,
        "attribute_index": world.attribute_index.tolist(),
        "train_ids": world.train_ids.tolist(),
        "test_ids": world.test_ids.tolist(),
        "files": sorted(files) + ["aerial_altitude.emb", "aerial_visibility.emb"],
    }
    atomic_write_text(out / "world.json", json.dumps(state, indent=2, sort_keys=True) + "\n")
    manifest = {"world": "world.json", "seed": world.config.seed}
    manifest.update(extra_manifest or {})
    return manifest


def load_world(world_dir) -> SyntheticWorld:
    path = Path(world_dir)
    try:
        state = json.loads((path / "world.json").read_text())
    except FileNotFoundError as exc:
        raise CorruptFile(f"{path}: missing world.json") from exc
    except json.JSONDecodeError as exc:
        raise CorruptFile(f"{path}/world.json: {exc}") from None
    config = ScenarioConfig(**state["scenario"])
    n_tok = state["tokens_per_sample"]

    def load(name, tokens=None):
        feats, ids = read_embeddings(path / name)
        mod = Modality(feats.astype(np.float64), None if ids is None else ids.astype(np.int64))
        if tokens:
            tok, _ = read_embeddings(path / tokens)
            if tok.shape[0] != feats.shape[0] * n_tok:
                raise CorruptFile(f"{tokens}: expected {feats.shape[0] * n_tok} token rows")
            mod.tokens = tok.astype(np.float64).reshape(feats.shape[0], n_tok, -1)
        return mod

    text = load("text.emb", "text_tokens.emb")
    aerial = load("aerial.emb", "aerial_tokens.emb")
    ground = load("ground.emb") if (path / "ground.emb").exists() else None
    protos, _ = read_embeddings(path / "prototypes.emb")
    vis, _ = read_embeddings(path / "aerial_visibility.emb")
    alt, _ = read_embeddings(path / "aerial_altitude.emb")
    return SyntheticWorld(
        config=config,
        prototypes=protos.astype(np.float64),
        attribute_pool=read_embeddings(path / "attribute_pool.emb")[0].astype(np.float64),
        attribute_index=np.asarray(state["attribute_index"], dtype=np.int64).reshape(len(protos), -1),
        text=text,
        aerial=aerial,
        ground=ground,
        visibility=vis.astype(bool),
        altitude=alt[:, 0].astype(np.float64),
        train_ids=np.asarray(state["train_ids"], dtype=np.int64),
        test_ids=np.asarray(state["test_ids"], dtype=np.int64),
    )
