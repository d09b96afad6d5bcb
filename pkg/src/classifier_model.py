# src/classifier_model.py
"""
AdvMetric - Classifier f with Penultimate Embedding Head h
LeNet-style network, checkpoint container, and the SGD optimiser that owns
parameter updates
"""

import contextlib
import hashlib
import json
import logging
import os
import struct
from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Any, Dict, Iterator, List, Optional, Sequence, Tuple

import jsonschema
import numpy as np

import tensor_autodiff as ad
from errors import CheckpointError, ConfigError, DataError, ShapeError
from mnist_data import IMAGE_SHAPE, NUM_CLASSES
from tensor_autodiff import Tensor

logger = logging.getLogger(__name__)

EMBEDDING_DIM = 64

# ordered name -> weight tensor, in architecture order
ModelParams = Dict[str, Tensor]

# conv(1->16, 5x5) -> relu -> pool2 -> conv(16->32, 5x5) -> relu -> pool2
# -> flatten -> linear(512->64) -> relu = embedding -> linear(64->10) = logits
ARCHITECTURE: Tuple[Dict[str, Any], ...] = (
    {'layer': 'conv2d', 'name': 'conv1', 'in_channels': 1, 'out_channels': 16, 'kernel': 5},
    {'layer': 'relu'},
    {'layer': 'maxpool2d', 'size': 2},
    {'layer': 'conv2d', 'name': 'conv2', 'in_channels': 16, 'out_channels': 32, 'kernel': 5},
    {'layer': 'relu'},
    {'layer': 'maxpool2d', 'size': 2},
    {'layer': 'flatten'},
    {'layer': 'linear', 'name': 'fc1', 'in_features': 512, 'out_features': EMBEDDING_DIM},
    {'layer': 'relu'},
    {'layer': 'linear', 'name': 'fc2', 'in_features': EMBEDDING_DIM, 'out_features': NUM_CLASSES},
)

CHECKPOINT_MAGIC = b'ADVMCKPT'
CHECKPOINT_VERSION = 1
_PREAMBLE = struct.Struct('<8sII')  # magic, format version, header length
_CHECKSUM_BYTES = 32

CHECKPOINT_HEADER_SCHEMA = {
    'type': 'object',
    'required': ['format_version', 'architecture', 'embedding_dim', 'num_classes',
                 'params', 'config_hash', 'seed'],
    'properties': {
        'format_version': {'type': 'integer'},
        'architecture': {'type': 'array', 'items': {'type': 'object', 'required': ['layer']}},
        'embedding_dim': {'type': 'integer', 'minimum': 1},
        'num_classes': {'type': 'integer', 'minimum': 2},
        'config_hash': {'type': ['string', 'null']},
        'seed': {'type': ['integer', 'null']},
        'params': {
            'type': 'array',
            'items': {
                'type': 'object',
                'required': ['name', 'shape', 'offset', 'count'],
                'properties': {
                    'name': {'type': 'string'},
                    'shape': {'type': 'array', 'items': {'type': 'integer', 'minimum': 0}},
                    'offset': {'type': 'integer', 'minimum': 0},
                    'count': {'type': 'integer', 'minimum': 0},
                },
            },
        },
    },
}


def _param_shapes(architecture: Sequence[Dict[str, Any]]) -> "OrderedDict[str, Tuple[Tuple[int, ...], int]]":
    """Parameter name -> (shape, fan_in), in architecture order"""
    shapes: "OrderedDict[str, Tuple[Tuple[int, ...], int]]" = OrderedDict()
    for layer in architecture:
        if layer['layer'] == 'conv2d':
            k = layer['kernel']
            fan_in = layer['in_channels'] * k * k
            shapes[f"{layer['name']}.weight"] = ((layer['out_channels'], layer['in_channels'], k, k), fan_in)
            shapes[f"{layer['name']}.bias"] = ((layer['out_channels'],), fan_in)
        elif layer['layer'] == 'linear':
            fan_in = layer['in_features']
            shapes[f"{layer['name']}.weight"] = ((layer['in_features'], layer['out_features']), fan_in)
            shapes[f"{layer['name']}.bias"] = ((layer['out_features'],), fan_in)
    return shapes


@dataclass
class ClassifierModel:
    """Classifier f; ``forward`` also exposes the penultimate embedding h"""
    params: ModelParams
    architecture: Tuple[Dict[str, Any], ...] = ARCHITECTURE
    embedding_dim: int = EMBEDDING_DIM
    num_classes: int = NUM_CLASSES
    config_hash: Optional[str] = None
    seed: Optional[int] = None

    @classmethod
    def initialize(cls, rng: np.random.Generator, architecture: Tuple[Dict[str, Any], ...] = ARCHITECTURE,
                   seed: Optional[int] = None) -> "ClassifierModel":
        """Uniform fan-in initialisation in +-sqrt(1/fan_in)"""
        params: ModelParams = OrderedDict()
        for name, (shape, fan_in) in _param_shapes(architecture).items():
            bound = np.sqrt(1.0 / fan_in)
            params[name] = Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True)
        last = [layer for layer in architecture if layer['layer'] == 'linear'][-1]
        return cls(params=params, architecture=tuple(architecture),
                   embedding_dim=last['in_features'], num_classes=last['out_features'], seed=seed)

    def parameters(self) -> List[Tensor]:
        return list(self.params.values())

    def forward(self, x: Any) -> Tuple[Tensor, Tensor]:
        """(embeddings B x d_h, logits B x C); the embedding is the input of the final linear layer"""
        x = ad.as_tensor(x)
        if x.ndim != 4 or x.shape[1:] != IMAGE_SHAPE:
            raise ShapeError("forward", x.shape, ('B',) + IMAGE_SHAPE)
        last_linear = max(i for i, layer in enumerate(self.architecture) if layer['layer'] == 'linear')
        embedding = None
        out = x
        for i, layer in enumerate(self.architecture):
            kind = layer['layer']
            if i == last_linear:
                embedding = out
            if kind == 'conv2d':
                out = ad.conv2d(out, self.params[f"{layer['name']}.weight"], self.params[f"{layer['name']}.bias"])
            elif kind == 'relu':
                out = ad.relu(out)
            elif kind == 'maxpool2d':
                out = ad.maxpool2d(out, layer['size'])
            elif kind == 'flatten':
                out = ad.reshape(out, (out.shape[0], -1))
            elif kind == 'linear':
                out = ad.add(ad.matmul(out, self.params[f"{layer['name']}.weight"]),
                             self.params[f"{layer['name']}.bias"])
            else:
                raise ConfigError(f"unknown layer kind '{kind}'")
        return embedding, out

    __call__ = forward

    def infer(self, images: np.ndarray, batch_size: int = 1000) -> Tuple[np.ndarray, np.ndarray]:
        """Embeddings and logits for many images without recording on the tape"""
        embeddings, logits = [], []
        with ad.no_grad():
            for start in range(0, len(images), batch_size):
                emb, out = self.forward(images[start:start + batch_size])
                embeddings.append(emb.data)
                logits.append(out.data)
        if not embeddings:
            return (np.zeros((0, self.embedding_dim), np.float32), np.zeros((0, self.num_classes), np.float32))
        return np.concatenate(embeddings), np.concatenate(logits)

    def embed(self, images: np.ndarray, batch_size: int = 1000) -> np.ndarray:
        return self.infer(images, batch_size)[0]

    def predict(self, images: np.ndarray, batch_size: int = 1000) -> np.ndarray:
        """Argmax labels; ties go to the lowest class index"""
        _, logits = self.infer(images, batch_size)
        return logits.argmax(axis=1)

    @contextlib.contextmanager
    def frozen(self) -> Iterator["ClassifierModel"]:
        """Parameters stop requiring gradient for the duration of the block"""
        previous = [p.requires_grad for p in self.parameters()]
        for p in self.parameters():
            p.requires_grad = False
        try:
            yield self
        finally:
            for p, flag in zip(self.parameters(), previous):
                p.requires_grad = flag

    def param_hash(self) -> str:
        """SHA-256 over parameter names and their little-endian float32 blobs"""
        digest = hashlib.sha256()
        for name, tensor in self.params.items():
            digest.update(name.encode())
            digest.update(tensor.data.astype('<f4').tobytes())
        return digest.hexdigest()


def predict(model: ClassifierModel, x: np.ndarray) -> np.ndarray:
    return model.predict(x)


########### Checkpoints ###########

@dataclass
class Checkpoint:
    """Decoded checkpoint contents"""
    format_version: int
    architecture: Tuple[Dict[str, Any], ...]
    blobs: "OrderedDict[str, np.ndarray]"
    embedding_dim: int
    num_classes: int
    config_hash: Optional[str] = None
    seed: Optional[int] = None

    def to_model(self) -> ClassifierModel:
        params = OrderedDict((name, Tensor(blob, requires_grad=True)) for name, blob in self.blobs.items())
        return ClassifierModel(params=params, architecture=self.architecture, embedding_dim=self.embedding_dim,
                               num_classes=self.num_classes, config_hash=self.config_hash, seed=self.seed)


def save_checkpoint(model: ClassifierModel, path: str):
    """Versioned header, JSON manifest, little-endian float32 blobs, trailing SHA-256"""
    manifest, blobs, offset = [], [], 0
    for name, tensor in model.params.items():
        blob = tensor.data.astype('<f4').tobytes()
        manifest.append({'name': name, 'shape': list(tensor.shape), 'offset': offset, 'count': tensor.size})
        blobs.append(blob)
        offset += len(blob)
    header = json.dumps({
        'format_version': CHECKPOINT_VERSION,
        'architecture': list(model.architecture),
        'embedding_dim': model.embedding_dim,
        'num_classes': model.num_classes,
        'params': manifest,
        'config_hash': model.config_hash,
        'seed': model.seed,
    }, sort_keys=True).encode()
    body = _PREAMBLE.pack(CHECKPOINT_MAGIC, CHECKPOINT_VERSION, len(header)) + header + b''.join(blobs)
    with open(path, 'wb') as f:
        f.write(body)
        f.write(hashlib.sha256(body).digest())
    logger.info("saved checkpoint %s (%s)", path, model.param_hash()[:12])


def read_checkpoint(path: str) -> Checkpoint:
    if not os.path.exists(path):
        raise DataError(f"checkpoint not found: {path}")
    with open(path, 'rb') as f:
        raw = f.read()
    if len(raw) < _PREAMBLE.size + _CHECKSUM_BYTES:
        raise CheckpointError(f"checksum error in {path}: file truncated to {len(raw)} bytes", corrupt=True)
    body, checksum = raw[:-_CHECKSUM_BYTES], raw[-_CHECKSUM_BYTES:]
    if hashlib.sha256(body).digest() != checksum:
        raise CheckpointError(f"checksum error in {path}: stored digest does not match contents", corrupt=True)
    magic, version, header_len = _PREAMBLE.unpack(body[:_PREAMBLE.size])
    if magic != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path} is not an AdvMetric checkpoint", corrupt=True)
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"checkpoint format version {version} in {path}, expected {CHECKPOINT_VERSION}")

    header = json.loads(body[_PREAMBLE.size:_PREAMBLE.size + header_len])
    try:
        jsonschema.validate(header, CHECKPOINT_HEADER_SCHEMA)
    except jsonschema.ValidationError as e:
        raise CheckpointError(f"malformed checkpoint header in {path}: {e.message}", corrupt=True)
    if header['format_version'] != version:
        raise CheckpointError(f"header version {header['format_version']} disagrees with preamble {version}")

    payload = body[_PREAMBLE.size + header_len:]
    blobs: "OrderedDict[str, np.ndarray]" = OrderedDict()
    for entry in header['params']:
        start, count = entry['offset'], entry['count']
        chunk = payload[start:start + 4 * count]
        if len(chunk) != 4 * count:
            raise CheckpointError(f"parameter {entry['name']} overruns the payload in {path}", corrupt=True)
        blobs[entry['name']] = np.frombuffer(chunk, dtype='<f4').astype(np.float32).reshape(entry['shape'])
    return Checkpoint(
        format_version=version,
        architecture=tuple(header['architecture']),
        blobs=blobs,
        embedding_dim=header['embedding_dim'],
        num_classes=header['num_classes'],
        config_hash=header['config_hash'],
        seed=header['seed'],
    )


def load_checkpoint(path: str) -> ClassifierModel:
    model = read_checkpoint(path).to_model()
    logger.info("loaded checkpoint %s (%s)", path, model.param_hash()[:12])
    return model


########### Optimiser ###########

@dataclass
class SGDMomentum:
    """Plain SGD with heavy-ball momentum: v = mu*v + g; p -= lr*v"""
    params: Sequence[Tensor]
    lr: float = 0.01
    momentum: float = 0.9
    _velocity: List[np.ndarray] = field(default_factory=list, repr=False)

    def __post_init__(self):
        self._velocity = [np.zeros(p.shape, dtype=np.float32) for p in self.params]

    def step(self):
        for p, v in zip(self.params, self._velocity):
            if p.grad is None:
                continue
            v *= np.float32(self.momentum)
            v += p.grad
            # new array; tensors already recorded keep their forward values
            p.data = (p.data - np.float32(self.lr) * v).astype(np.float32)

    def zero_grad(self):
        for p in self.params:
            p.grad = None
