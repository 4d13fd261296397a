"""Kernel-model file format: JSON header line + little-endian float32 payload.

Per level the header declares either a constant feature vector (stored in
the header itself) or a learned field, whose payload blocks follow in
order: per-voxel features in the hierarchy's canonical voxel order, then
each MLP layer's weight matrix (row-major) and bias vector.
"""

import json

import numpy as np

from .errors import DimensionMismatch, FormatError, IoError
from .kernels import FeatureFieldSpec, KernelModel, MLPWeights

_MAGIC = "kernelsurf-model"


def save_model(model: KernelModel, path) -> None:
    hier = model.hierarchy
    fields = []
    blocks = []
    for level, spec in enumerate(model.feature_fields, start=1):
        if spec.kind == "constant":
            fields.append({"kind": "constant", "value": spec.constant.tolist()})
            continue
        feats = hier.features_at(level)
        entry = {
            "kind": "learned",
            "voxel_count": int(feats.shape[0]),
            "feature_dim": int(feats.shape[1]),
            "concat_position": bool(spec.concat_position),
            "layers": [
                {"out": int(w.shape[0]), "in": int(w.shape[1]), "activation": act}
                for w, _, act in spec.mlp.layers
            ],
        }
        fields.append(entry)
        blocks.append(feats)
        for w, b, _ in spec.mlp.layers:
            blocks.append(w)
            blocks.append(b)
    header = {
        "magic": _MAGIC,
        "version": 1,
        "levels": hier.levels,
        "d": model.feature_fields[0].d,
        "fields": fields,
    }
    try:
        with open(path, "wb") as fh:
            fh.write((json.dumps(header) + "\n").encode("utf-8"))
            for block in blocks:
                fh.write(np.ascontiguousarray(block, dtype="<f4").tobytes())
    except OSError as exc:
        raise IoError(f"cannot write {path}: {exc}") from exc


def load_model(path, hierarchy) -> KernelModel:
    """Load a model file and bind it to the active hierarchy.

    Learned per-voxel features are attached to the hierarchy (keyed by its
    canonical voxel order). Raises FormatError for malformed/truncated
    files and DimensionMismatch when the file disagrees with the hierarchy.
    """
    try:
        with open(path, "rb") as fh:
            header_line = fh.readline()
            payload = fh.read()
    except OSError as exc:
        raise IoError(f"cannot read {path}: {exc}") from exc
    try:
        header = json.loads(header_line.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"{path}: bad model header: {exc}") from exc
    if header.get("magic") != _MAGIC or header.get("version") != 1:
        raise FormatError(f"{path}: not a version-1 model file")
    if header.get("levels") != hierarchy.levels:
        raise DimensionMismatch(
            f"model has {header.get('levels')} levels, hierarchy has {hierarchy.levels}"
        )
    fields = header.get("fields")
    if not isinstance(fields, list) or len(fields) != hierarchy.levels:
        raise FormatError(f"{path}: header must list one field per level")

    floats = np.frombuffer(payload, dtype="<f4")
    cursor = 0

    def take(count, what):
        nonlocal cursor
        if cursor + count > floats.shape[0]:
            raise FormatError(f"{path}: truncated payload while reading {what}")
        out = floats[cursor : cursor + count].astype(np.float64)
        cursor += count
        return out

    specs = []
    for level, entry in enumerate(fields, start=1):
        kind = entry.get("kind")
        if kind == "constant":
            specs.append(FeatureFieldSpec.constant_field(entry["value"]))
            continue
        if kind != "learned":
            raise FormatError(f"{path}: unknown field kind {kind!r}")
        n_vox = int(entry["voxel_count"])
        f_dim = int(entry["feature_dim"])
        if n_vox != hierarchy.voxel_count(level):
            raise DimensionMismatch(
                f"level {level}: model carries {n_vox} voxels, "
                f"hierarchy has {hierarchy.voxel_count(level)}"
            )
        feats = take(n_vox * f_dim, f"level-{level} features").reshape(n_vox, f_dim)
        layers = []
        for spec in entry["layers"]:
            o, i = int(spec["out"]), int(spec["in"])
            w = take(o * i, f"level-{level} weights").reshape(o, i)
            b = take(o, f"level-{level} biases")
            layers.append((w, b, spec["activation"]))
        mlp = MLPWeights(layers)
        expected_in = f_dim + (3 if entry.get("concat_position") else 0)
        if mlp.in_dim != expected_in:
            raise DimensionMismatch(
                f"level {level}: MLP input width {mlp.in_dim} != stored feature dim {expected_in}"
            )
        if mlp.out_dim != int(header["d"]):
            raise DimensionMismatch(
                f"level {level}: MLP output width {mlp.out_dim} != d={header['d']}"
            )
        hierarchy.set_features(level, feats)
        specs.append(
            FeatureFieldSpec.learned_field(mlp, bool(entry.get("concat_position", False)))
        )
    if cursor != floats.shape[0]:
        raise FormatError(f"{path}: {floats.shape[0] - cursor} unexpected trailing floats")
    return KernelModel(specs, hierarchy)
