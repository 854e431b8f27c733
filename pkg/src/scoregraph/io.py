"""Line-oriented JSON datasets and sample files; binary checkpoints.

Dataset and sample files start with one JSON header line followed by one JSON
record per line with fields ``n, nodes, edges_upper, conditions``. A dataset
record may give the full symmetric ``edges`` matrix instead of
``edges_upper``.

Checkpoints are ``MAGIC | version (u32) | header length (u64) | JSON header``
followed by one ``length (u64) | float64 bytes`` block per parameter array, and
a trailing CRC32 of everything before it.
"""

from __future__ import annotations

import json
import struct
import zlib
from pathlib import Path

import numpy as np

from .data import CategoricalSlot, ConditionKey, Dataset, NumericSlot
from .graph import Graph, StateSpaces
from .neural import NeuralScorer
from .noise import NoiseSchedule
from .scoring import TabularScorer

MAGIC = b"SGCKPT\x00\x01"
VERSION = 1
DATASET_FORMAT = "scoregraph-dataset"
SAMPLES_FORMAT = "scoregraph-samples"


class FormatError(ValueError):
    """Unparseable or invalid file content."""


class CorruptCheckpoint(FormatError):
    pass


class VersionMismatch(FormatError):
    pass


class SchemaMismatch(FormatError):
    pass


# -- schema and values ------------------------------------------------------

def schema_to_json(schema) -> list:
    out = []
    for slot in schema:
        if isinstance(slot, CategoricalSlot):
            out.append({"kind": "categorical", "num_classes": slot.num_classes})
        else:
            out.append({"kind": "numeric", "dim": slot.dim})
    return out


def schema_from_json(items) -> tuple:
    slots = []
    for k, item in enumerate(items):
        kind = item.get("kind")
        if kind == "categorical":
            slots.append(CategoricalSlot(int(item["num_classes"])))
        elif kind == "numeric":
            slots.append(NumericSlot(int(item.get("dim", 1))))
        else:
            raise FormatError(f"schema slot {k}: unknown kind {kind!r}")
    return tuple(slots)


def spaces_to_json(spaces: StateSpaces) -> dict:
    return {"node_states": spaces.node_cardinality, "edge_states": spaces.edge_cardinality,
            "absorbing": spaces.absorbing}


def spaces_from_json(d: dict) -> StateSpaces:
    return StateSpaces(int(d["node_states"]), int(d["edge_states"]), bool(d.get("absorbing", False)))


def value_to_json(value):
    if value is None or isinstance(value, int):
        return value
    return list(value)


def value_from_json(value):
    if value is None or isinstance(value, int):
        return value
    if isinstance(value, list):
        return tuple(float(v) for v in value)
    if isinstance(value, float):
        return (value,)
    raise FormatError(f"unrecognised condition value {value!r}")


def key_to_json(key: ConditionKey) -> list:
    return [[m, value_to_json(v)] for m, v in key.items]


def key_from_json(items) -> ConditionKey:
    return ConditionKey(tuple((int(m), value_from_json(v)) for m, v in items))


# -- graph files ------------------------------------------------------------

def _record(G: Graph, conditions) -> str:
    return json.dumps({"n": G.n, "nodes": list(G.nodes), "edges_upper": list(G.edges_upper),
                       "conditions": [value_to_json(c) for c in conditions]})


def _parse_graph(rec: dict) -> Graph:
    if "edges_upper" in rec:
        G = Graph(tuple(int(x) for x in rec["nodes"]), tuple(int(e) for e in rec["edges_upper"]))
    elif "edges" in rec:
        G = Graph.from_matrix(rec["nodes"], np.asarray(rec["edges"], dtype=np.int64))
    else:
        raise FormatError("record has neither edges_upper nor edges")
    if "n" in rec and int(rec["n"]) != G.n:
        raise FormatError(f"record declares n={rec['n']} but has {G.n} nodes")
    return G


def _read_lines(path):
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"no such file: {path}")
    lines = path.read_text().splitlines()
    if not lines:
        raise FormatError(f"{path}: empty file, expected a header line")
    try:
        header = json.loads(lines[0])
    except json.JSONDecodeError as err:
        raise FormatError(f"{path}:1: bad header: {err}") from None
    records = []
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        try:
            records.append((lineno, json.loads(line)))
        except json.JSONDecodeError as err:
            raise FormatError(f"{path}:{lineno}: {err}") from None
    return header, records


def save_dataset(dataset: Dataset, path) -> None:
    header = {"format": DATASET_FORMAT, "version": VERSION, "n": dataset.n,
              **spaces_to_json(dataset.spaces), "schema": schema_to_json(dataset.schema)}
    lines = [json.dumps(header)] + [_record(G, c) for G, c in zip(dataset.graphs, dataset.conditions)]
    Path(path).write_text("\n".join(lines) + "\n")


def load_dataset(path) -> Dataset:
    header, records = _read_lines(path)
    if header.get("format") != DATASET_FORMAT:
        raise FormatError(f"{path}: not a dataset file")
    spaces = spaces_from_json(header)
    schema = schema_from_json(header.get("schema", []))
    graphs, conds = [], []
    for index, (lineno, rec) in enumerate(records):
        try:
            G = _parse_graph(rec)
        except ValueError as err:
            raise FormatError(f"{path}:{lineno}: record {index}: {err}") from None
        graphs.append(G)
        conds.append(tuple(value_from_json(v) for v in rec.get("conditions", [None] * len(schema))))
    if not graphs:
        raise FormatError(f"{path}: dataset is empty")
    try:
        return Dataset(int(header["n"]), spaces, schema, graphs, conds)
    except ValueError as err:
        raise FormatError(f"{path}: {err}") from None


def save_samples(graphs, requested, path, meta: dict | None = None) -> None:
    header = {"format": SAMPLES_FORMAT, "version": VERSION, **(meta or {})}
    lines = [json.dumps(header, sort_keys=True)] + [_record(G, c) for G, c in zip(graphs, requested)]
    Path(path).write_text("\n".join(lines) + "\n")


def load_samples(path):
    """Returns ``(header, graphs, requested)``."""
    header, records = _read_lines(path)
    if header.get("format") != SAMPLES_FORMAT:
        raise FormatError(f"{path}: not a samples file")
    graphs, requested = [], []
    for lineno, rec in records:
        try:
            graphs.append(_parse_graph(rec))
        except ValueError as err:
            raise FormatError(f"{path}:{lineno}: {err}") from None
        requested.append(tuple(value_from_json(v) for v in rec.get("conditions", [])))
    return header, graphs, requested


# -- checkpoints ------------------------------------------------------------

def scorer_header(scorer) -> dict:
    header = {
        "kind": scorer.kind,
        "n": scorer.n,
        "spaces": spaces_to_json(scorer.spaces),
        "schedule": {"eps": scorer.schedule.eps, "t_min": scorer.schedule.t_min},
        "schema": schema_to_json(scorer.schema),
    }
    if scorer.kind == "tabular":
        header["time_bins"] = scorer.time_bins
        header["keys"] = [key_to_json(k) for k in scorer.keys]
    else:
        header.update(hidden=scorer.hidden, d_h=scorer.d_h, seed=scorer.seed)
    return header


def save_checkpoint(scorer, path, train_config: dict | None = None, seed: int | None = None) -> None:
    header = scorer_header(scorer)
    names = sorted(scorer.params)
    header["arrays"] = [{"name": k, "shape": list(scorer.params[k].shape)} for k in names]
    header["train_config"] = train_config or {}
    header["seed"] = seed
    head = json.dumps(header, sort_keys=True).encode()
    parts = [MAGIC, struct.pack("<IQ", VERSION, len(head)), head]
    for k in names:
        data = np.ascontiguousarray(scorer.params[k], dtype="<f8").tobytes()
        parts += [struct.pack("<Q", len(data)), data]
    body = b"".join(parts)
    Path(path).write_bytes(body + struct.pack("<I", zlib.crc32(body)))


def read_checkpoint(path) -> tuple[dict, dict]:
    """Header and parameter arrays, with integrity checks."""
    blob = Path(path).read_bytes()
    if not blob.startswith(MAGIC):
        raise CorruptCheckpoint(f"{path}: not a checkpoint (bad magic)")
    if len(blob) < len(MAGIC) + 16:
        raise CorruptCheckpoint(f"{path}: truncated header")
    body, (crc,) = blob[:-4], struct.unpack("<I", blob[-4:])
    pos = len(MAGIC)
    version, head_len = struct.unpack_from("<IQ", blob, pos)
    if version != VERSION:
        raise VersionMismatch(f"{path}: checkpoint version {version}, this build reads {VERSION}")
    if zlib.crc32(body) != crc:
        raise CorruptCheckpoint(f"{path}: checksum mismatch (truncated or modified file)")
    pos += 12
    header = json.loads(body[pos:pos + head_len])
    pos += head_len
    arrays = {}
    for entry in header["arrays"]:
        (length,) = struct.unpack_from("<Q", body, pos)
        pos += 8
        shape = tuple(entry["shape"])
        if length != 8 * int(np.prod(shape)) or pos + length > len(body):
            raise CorruptCheckpoint(f"{path}: array {entry['name']} has a bad length")
        arrays[entry["name"]] = np.frombuffer(body, dtype="<f8", count=length // 8, offset=pos).reshape(shape).copy()
        pos += length
    if pos != len(body):
        raise CorruptCheckpoint(f"{path}: trailing bytes after the last array")
    return header, arrays


def load_checkpoint(path, schema=None):
    """Rebuild the scorer; ``schema`` (if given) must match the stored one."""
    header, arrays = read_checkpoint(path)
    stored = schema_from_json(header["schema"])
    if schema is not None and tuple(schema) != stored:
        raise SchemaMismatch(f"{path}: checkpoint schema {stored} differs from {tuple(schema)}")
    spaces = spaces_from_json(header["spaces"])
    sched = NoiseSchedule(**header["schedule"])
    if header["kind"] == "tabular":
        keys = [key_from_json(k) for k in header["keys"]]
        scorer = TabularScorer(header["n"], spaces, keys, sched, header["time_bins"], schema=stored)
    elif header["kind"] == "neural":
        scorer = NeuralScorer(header["n"], spaces, stored, sched, hidden=header["hidden"],
                              d_h=header["d_h"], seed=header["seed"])
    else:
        raise FormatError(f"{path}: unknown scorer kind {header['kind']!r}")
    if set(arrays) != set(scorer.params):
        raise SchemaMismatch(f"{path}: parameter names do not match a {header['kind']} scorer")
    for name, arr in arrays.items():
        if arr.shape != scorer.params[name].shape:
            raise SchemaMismatch(f"{path}: {name} has shape {arr.shape}, expected {scorer.params[name].shape}")
        scorer.params[name][...] = arr
    scorer.checkpoint_meta = {"train_config": header.get("train_config", {}), "seed": header.get("seed")}
    return scorer
