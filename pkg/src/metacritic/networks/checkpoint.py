"""Checkpoint persistence; see :mod:`metacritic.container` for the byte layout.

Header keys::

    arch         base architecture (``to_dict`` output)
    critic_arch  critic spec or null
    groups       {group: [{"name", "partition", "shape", "offset"}, ...]}
                 groups are "theta", "critic", "lslr"
    bn_state     {"momentum": m, "layers": [{"name", "mean": rec, "var": rec}]}
    meta         free-form JSON metadata
"""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Optional, Union

from ..container import ArrayWriter, FormatError, read_array, read_container, write_container
from .classifiers import architecture_from_dict
from .critic import CriticSpec
from .params import BatchNormState, ParamSet

MAGIC = b"METACKPT"


@dataclass
class Checkpoint:
    arch: object
    groups: Dict[str, ParamSet]
    bn_state: Optional[BatchNormState] = None
    critic_arch: Optional[CriticSpec] = None
    meta: dict = field(default_factory=dict)


def save_checkpoint(path: Union[str, Path], ckpt: Checkpoint) -> None:
    writer = ArrayWriter()
    groups = {}
    for gname, params in ckpt.groups.items():
        entries = []
        for name, t in params.items():
            rec = writer.add(t.data)
            rec.update(name=name, partition=params.partition_of(name))
            entries.append(rec)
        groups[gname] = entries
    bn = None
    if ckpt.bn_state is not None:
        bn = {"momentum": ckpt.bn_state.momentum,
              "layers": [{"name": k, "mean": writer.add(m), "var": writer.add(v)}
                         for k, (m, v) in ckpt.bn_state.stats.items()]}
    header = {
        "arch": ckpt.arch.to_dict(),
        "critic_arch": ckpt.critic_arch.to_dict() if ckpt.critic_arch is not None else None,
        "groups": groups,
        "bn_state": bn,
        "meta": ckpt.meta,
    }
    write_container(path, MAGIC, header, writer)


def load_checkpoint(path: Union[str, Path]) -> Checkpoint:
    header, data = read_container(path, MAGIC)
    try:
        arch = architecture_from_dict(header["arch"])
        critic = header.get("critic_arch")
        if critic is not None:
            critic = dict(critic)
            critic.pop("kind", None)
            critic = CriticSpec(**critic)
        groups = {}
        for gname, entries in header["groups"].items():
            arrays, partition = {}, {}
            for i, rec in enumerate(entries):
                arrays[rec["name"]] = read_array(data, rec, f"{path}: group {gname} record {i}")
                partition[rec["name"]] = rec.get("partition", "adapted")
            groups[gname] = ParamSet.from_arrays(arrays, partition)
        bn_state = None
        if header.get("bn_state") is not None:
            bn = header["bn_state"]
            stats = {layer["name"]: (read_array(data, layer["mean"], f"{path}: bn {layer['name']}"),
                                     read_array(data, layer["var"], f"{path}: bn {layer['name']}"))
                     for layer in bn["layers"]}
            bn_state = BatchNormState(stats, bn["momentum"])
    except (KeyError, TypeError) as exc:
        raise FormatError(f"{path}: malformed checkpoint header ({exc!r})") from None
    return Checkpoint(arch, groups, bn_state, critic, header.get("meta", {}))
