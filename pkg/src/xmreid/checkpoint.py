"""Self-describing checkpoint archive.

A checkpoint is a ZIP file holding

    header.json   {"format": "ddag-ckpt/1", "config": ..., "epoch": ...,
                   "rng_state": ..., ...}
    tensors.json  [{"name", "dtype", "shape", "file"}, ...]
    data/<i>.bin  raw little-endian tensor bytes

Model parameters/buffers are stored under their state-dict names and the
SGD momentum buffers under "optim/<param name>/momentum_buffer". Archive
entries carry a fixed timestamp so identical states produce identical
bytes.
"""

import io
import json
import zipfile
from pathlib import Path

import numpy as np
import torch

from .backbone import BackboneConfig
from .errors import FormatError, ModelError

CHECKPOINT_FORMAT = "ddag-ckpt/1"

_NUMPY_DTYPES = {
    "float32": "<f4",
    "float64": "<f8",
    "int64": "<i8",
    "int32": "<i4",
    "uint8": "u1",
    "bool": "?",
}
_EPOCH_STAMP = (1980, 1, 1, 0, 0, 0)


def _dtype_name(tensor):
    name = str(tensor.dtype).replace("torch.", "")
    if name not in _NUMPY_DTYPES:
        raise FormatError("unsupported tensor dtype %s" % name)
    return name


def save_checkpoint(path, header: dict, tensors: dict):
    """Write named tensors plus a JSON header; deterministic bytes."""
    header = dict(header)
    header["format"] = CHECKPOINT_FORMAT
    index = []
    blobs = []
    for i, (name, tensor) in enumerate(tensors.items()):
        dtype = _dtype_name(tensor)
        array = tensor.detach().cpu().contiguous().numpy().astype(_NUMPY_DTYPES[dtype], copy=False)
        entry = {"name": name, "dtype": dtype, "shape": list(tensor.shape), "file": "data/%d.bin" % i}
        index.append(entry)
        blobs.append((entry["file"], array.tobytes()))
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    buffer = io.BytesIO()
    with zipfile.ZipFile(buffer, "w", compression=zipfile.ZIP_DEFLATED) as archive:
        def put(name, data):
            info = zipfile.ZipInfo(name, date_time=_EPOCH_STAMP)
            info.compress_type = zipfile.ZIP_DEFLATED
            archive.writestr(info, data)
        put("header.json", json.dumps(header, indent=2))
        put("tensors.json", json.dumps(index, indent=2))
        for file_name, data in blobs:
            put(file_name, data)
    path.write_bytes(buffer.getvalue())


def load_checkpoint(path):
    """Returns (header dict, {name: tensor})."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(str(path))
    with zipfile.ZipFile(path) as archive:
        header = json.loads(archive.read("header.json"))
        if header.get("format") != CHECKPOINT_FORMAT:
            raise FormatError("unsupported checkpoint format %r" % header.get("format"))
        index = json.loads(archive.read("tensors.json"))
        tensors = {}
        for entry in index:
            raw = archive.read(entry["file"])
            array = np.frombuffer(raw, dtype=_NUMPY_DTYPES[entry["dtype"]]).reshape(entry["shape"])
            tensors[entry["name"]] = torch.from_numpy(array.copy())
    return header, tensors


def model_tensors(model):
    """Parameters and buffers under their state-dict names."""
    return {name: value for name, value in model.state_dict().items()}


def optimizer_tensors(model, optimizer):
    """SGD momentum buffers keyed by the owning parameter's name."""
    by_param = {id(p): name for name, p in model.named_parameters()}
    out = {}
    for group in optimizer.param_groups:
        for param in group["params"]:
            state = optimizer.state.get(param, {})
            buffer = state.get("momentum_buffer")
            if buffer is not None:
                out["optim/%s/momentum_buffer" % by_param[id(param)]] = buffer
    return out


def restore_optimizer(model, optimizer, tensors):
    by_name = dict(model.named_parameters())
    for key, tensor in tensors.items():
        if not key.startswith("optim/"):
            continue
        name = key[len("optim/"):-len("/momentum_buffer")]
        if name not in by_name:
            raise ModelError("momentum buffer for unknown parameter %r" % name)
        optimizer.state[by_name[name]] = {"momentum_buffer": tensor.clone()}


def build_model_from_header(header):
    """Reconstruct the network described by a checkpoint header."""
    from .config import ExperimentConfig
    from .model import build_model

    config = ExperimentConfig.from_dict(header["config"])
    backbone_config = BackboneConfig(
        variant=config.model.variant,
        stage_channels=tuple(config.model.stage_channels),
        shared_from_stage=config.model.shared_from_stage,
    )
    return build_model(
        backbone_config,
        num_classes=header["num_classes"],
        mode=config.train.mode,
        num_parts=config.model.parts,
        graph_heads=config.model.graph_heads,
        graph_dim=config.model.graph_dim,
        margin=config.train.margin,
    ), config


def load_model(path):
    """Load a checkpoint into a freshly built model in eval mode."""
    header, tensors = load_checkpoint(path)
    model, config = build_model_from_header(header)
    state = {k: v for k, v in tensors.items() if not k.startswith("optim/")}
    try:
        model.load_state_dict(state)
    except RuntimeError as exc:
        raise ModelError("checkpoint does not match the configured model: %s" % exc) from exc
    model.eval()
    return model, header, config
