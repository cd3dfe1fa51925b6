"""Parameter initialisers and helpers for nested parameter trees.

A parameter tree is a nested ``dict`` whose leaves are :class:`Node`
objects.  Trainable leaves have ``requires_grad=True``; batch-norm running
statistics are stored as non-trainable leaves next to their layer.
"""
from __future__ import annotations

import math

import numpy as np

from .tensor import Node


def make_rng(seed: int, stream: int = 0) -> np.random.Generator:
    """Counter-based generator: the (seed, stream) pair is the Philox key."""
    return np.random.Generator(np.random.Philox(key=[int(seed) % 2**64, int(stream) % 2**64]))


def param(value, dtype) -> Node:
    return Node(np.asarray(value, dtype=dtype), requires_grad=True)


def buffer(value, dtype) -> Node:
    return Node(np.asarray(value, dtype=dtype), requires_grad=False)


def uniform(rng, shape, fan_in, dtype) -> Node:
    bound = 1.0 / math.sqrt(fan_in)
    return param(rng.uniform(-bound, bound, size=shape), dtype)


def zeros(shape, dtype) -> Node:
    return param(np.zeros(shape), dtype)


def ones(shape, dtype) -> Node:
    return param(np.ones(shape), dtype)


def conv(rng, out_ch, in_ch, k, dtype, bias=True) -> dict:
    p = {"weight": uniform(rng, (out_ch, in_ch, k, k), in_ch * k * k, dtype)}
    if bias:
        p["bias"] = uniform(rng, (out_ch,), in_ch * k * k, dtype)
    return p


def dense(rng, out_f, in_f, dtype, bias=True) -> dict:
    p = {"weight": uniform(rng, (out_f, in_f), in_f, dtype)}
    if bias:
        p["bias"] = uniform(rng, (out_f,), in_f, dtype)
    return p


def norm(ch, dtype) -> dict:
    return {"gamma": ones((ch,), dtype), "beta": zeros((ch,), dtype)}


def batch_norm(ch, dtype) -> dict:
    p = norm(ch, dtype)
    p["running_mean"] = buffer(np.zeros(ch), dtype)
    p["running_var"] = buffer(np.ones(ch), dtype)
    return p


def flatten(tree, prefix="") -> dict[str, Node]:
    """Dotted-name view of a parameter tree, in insertion order.

    A leaf shared between several places appears once, under its first name.
    """
    out = {}
    seen = set()

    def walk(node, name):
        if isinstance(node, dict):
            for key, val in node.items():
                walk(val, f"{name}{key}.")
        elif isinstance(node, list):
            for i, val in enumerate(node):
                walk(val, f"{name}{i}.")
        elif id(node) not in seen:
            seen.add(id(node))
            out[name[:-1]] = node

    walk(tree, prefix)
    return out


def trainable(tree) -> dict[str, Node]:
    return {k: v for k, v in flatten(tree).items() if v.requires_grad}


def count(tree) -> int:
    return sum(v.value.size for v in trainable(tree).values())


def map_leaves(tree, fn):
    """Copy of ``tree`` with every leaf replaced by ``fn(name, leaf)``."""

    def walk(node, prefix):
        if isinstance(node, dict):
            return {k: walk(v, f"{prefix}{k}.") for k, v in node.items()}
        if isinstance(node, list):
            return [walk(v, f"{prefix}{i}.") for i, v in enumerate(node)]
        return fn(prefix[:-1], node)

    return walk(tree, "")


def zero_grads(tree) -> None:
    for leaf in flatten(tree).values():
        leaf.grad = None
