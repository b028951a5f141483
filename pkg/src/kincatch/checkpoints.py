"""Versioned text checkpoints for the manifold model and condition map.

One JSON document per checkpoint, floats at 17 significant digits (exact
round trip), flat parameter arrays plus layer sizes, and fingerprints of the
producing config and dataset. Loaders reject unknown schema versions and
parameter-count mismatches.
"""

from __future__ import annotations

import numpy as np

from .diffnet import Mlp
from .manifold import AlignmentMeta, ConditionMap, ManifoldModel, Scalers
from . import serialize

CHECKPOINT_SCHEMA_VERSION = 1


class CheckpointError(ValueError):
    pass


def _net_doc(net: Mlp) -> dict:
    return {"layer_sizes": list(net.layer_sizes),
            "params": net.flat_parameters().tolist()}


def _net_from_doc(doc: dict, what: str) -> Mlp:
    sizes = [int(s) for s in doc["layer_sizes"]]
    rng = np.random.default_rng(0)
    from .diffnet import mlp_init
    net = mlp_init(sizes, rng)
    flat = np.asarray(doc["params"], dtype=float)
    expected = net.flat_parameters().size
    if flat.size != expected:
        raise CheckpointError(
            f"{what}: parameter count {flat.size} != layer sizes imply {expected}")
    net.set_flat_parameters(flat)
    return net


def save_manifold(model: ManifoldModel, path, config_fingerprint: str = "",
                  dataset_fingerprint: str = "") -> None:
    doc = {
        "schema_version": CHECKPOINT_SCHEMA_VERSION,
        "kind": "manifold",
        "encoder": _net_doc(model.encoder),
        "decoder": _net_doc(model.decoder),
        "latent_dim": model.latent_dim,
        "cond_dim": model.cond_dim,
        "metric_floor": model.metric_floor,
        "w_diag": model.w_diag.tolist(),
        "scalers": {
            "xi_mean": model.scalers.xi_mean.tolist(),
            "xi_std": model.scalers.xi_std.tolist(),
            "cond_mean": model.scalers.cond_mean.tolist(),
            "cond_std": model.scalers.cond_std.tolist(),
        },
        "align": {
            "H": model.align.H, "n_joints": model.align.n_joints,
            "alpha_c": model.align.alpha_c, "duration": model.align.duration,
            "pre_warp": model.align.pre_warp, "post_warp": model.align.post_warp,
        },
        "train_indices": list(model.train_indices),
        "val_indices": list(model.val_indices),
        "config_fingerprint": config_fingerprint,
        "dataset_fingerprint": dataset_fingerprint,
    }
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(serialize.dumps(doc))
        fh.write("\n")


def load_manifold(path) -> tuple[ManifoldModel, dict]:
    with open(path, "r", encoding="utf-8") as fh:
        doc = serialize.loads(fh.read())
    if doc.get("schema_version") != CHECKPOINT_SCHEMA_VERSION:
        raise CheckpointError(f"unsupported checkpoint schema "
                              f"{doc.get('schema_version')!r} in {path}")
    if doc.get("kind") != "manifold":
        raise CheckpointError(f"expected a manifold checkpoint, got {doc.get('kind')!r}")
    sc = doc["scalers"]
    al = doc["align"]
    model = ManifoldModel(
        encoder=_net_from_doc(doc["encoder"], "encoder"),
        decoder=_net_from_doc(doc["decoder"], "decoder"),
        latent_dim=int(doc["latent_dim"]), cond_dim=int(doc["cond_dim"]),
        w_diag=np.asarray(doc["w_diag"], dtype=float),
        scalers=Scalers(np.asarray(sc["xi_mean"]), np.asarray(sc["xi_std"]),
                        np.asarray(sc["cond_mean"]), np.asarray(sc["cond_std"])),
        align=AlignmentMeta(int(al["H"]), int(al["n_joints"]), float(al["alpha_c"]),
                            float(al["duration"]), float(al["pre_warp"]),
                            float(al["post_warp"])),
        metric_floor=float(doc["metric_floor"]),
        train_indices=tuple(int(i) for i in doc["train_indices"]),
        val_indices=tuple(int(i) for i in doc["val_indices"]),
    )
    meta = {"config_fingerprint": doc["config_fingerprint"],
            "dataset_fingerprint": doc["dataset_fingerprint"]}
    return model, meta


def save_condmap(cmap: ConditionMap, path, config_fingerprint: str = "",
                 dataset_fingerprint: str = "") -> None:
    doc = {
        "schema_version": CHECKPOINT_SCHEMA_VERSION,
        "kind": "condmap",
        "net": _net_doc(cmap.net),
        "cond_mean": cmap.cond_mean.tolist(),
        "cond_std": cmap.cond_std.tolist(),
        "latent_dim": cmap.latent_dim,
        "dataset_fingerprint": cmap.dataset_fingerprint or dataset_fingerprint,
        "config_fingerprint": config_fingerprint,
    }
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(serialize.dumps(doc))
        fh.write("\n")


def load_condmap(path) -> tuple[ConditionMap, dict]:
    with open(path, "r", encoding="utf-8") as fh:
        doc = serialize.loads(fh.read())
    if doc.get("schema_version") != CHECKPOINT_SCHEMA_VERSION:
        raise CheckpointError(f"unsupported checkpoint schema "
                              f"{doc.get('schema_version')!r} in {path}")
    if doc.get("kind") != "condmap":
        raise CheckpointError(f"expected a condmap checkpoint, got {doc.get('kind')!r}")
    cmap = ConditionMap(
        net=_net_from_doc(doc["net"], "condmap net"),
        cond_mean=np.asarray(doc["cond_mean"], dtype=float),
        cond_std=np.asarray(doc["cond_std"], dtype=float),
        latent_dim=int(doc["latent_dim"]),
        dataset_fingerprint=doc.get("dataset_fingerprint", ""),
    )
    meta = {"config_fingerprint": doc["config_fingerprint"],
            "dataset_fingerprint": doc["dataset_fingerprint"]}
    return cmap, meta
