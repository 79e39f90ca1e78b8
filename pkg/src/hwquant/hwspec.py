"""Declarative hardware specification: allowed dtype signatures per operator."""
from __future__ import annotations

import enum
import json
from dataclasses import dataclass
from typing import Mapping, Sequence

from .graph import OPS, DType


class SpecError(ValueError):
    pass


class OpClass(enum.Enum):
    float_only = "float_only"
    integer_only = "integer_only"
    mixed = "mixed"


# Operators that may appear in a hardware spec (graph plumbing ops excluded).
SPEC_OPS = ("conv2d", "dense", "add", "relu", "clip", "max_pool2d", "global_avg_pool2d", "flatten")


@dataclass(frozen=True)
class Signature:
    in_dtypes: tuple[DType, ...]
    out_dtype: DType

    @property
    def is_float(self) -> bool:
        return all(d.is_float for d in self.in_dtypes) and self.out_dtype.is_float

    @property
    def is_integer(self) -> bool:
        return all(d.is_int for d in self.in_dtypes) and self.out_dtype.is_int

    def to_json(self) -> dict:
        return {"in": [d.value for d in self.in_dtypes], "out": self.out_dtype.value}

    def __str__(self):
        return f"({', '.join(map(str, self.in_dtypes))}) -> {self.out_dtype}"


def signature(in_dtypes: Sequence, out_dtype) -> Signature:
    return Signature(tuple(DType.parse(d) for d in in_dtypes), DType.parse(out_dtype))


_FLOAT_DEFAULT: dict[int, tuple[Signature, ...]] = {}


def _float_only(arity: int) -> tuple[Signature, ...]:
    if arity not in _FLOAT_DEFAULT:
        _FLOAT_DEFAULT[arity] = (Signature((DType.float32,) * arity, DType.float32),)
    return _FLOAT_DEFAULT[arity]


class HardwareSpec:
    """Per-operator signature table. Unlisted operators are float-only."""

    def __init__(self, table: Mapping[str, Sequence[Signature]] | None = None):
        self.table: dict[str, tuple[Signature, ...]] = {}
        for op, sigs in (table or {}).items():
            if op not in SPEC_OPS:
                raise SpecError(f"unknown operator {op!r}")
            sigs = tuple(sigs)
            if not sigs:
                raise SpecError(f"{op}: at least one signature required")
            arity = OPS[op].arity
            for s in sigs:
                if len(s.in_dtypes) != arity:
                    raise SpecError(f"{op}: signature {s} has {len(s.in_dtypes)} inputs, expected {arity}")
            if len(set(sigs)) != len(sigs):
                raise SpecError(f"{op}: duplicate signature")
            self.table[op] = sigs

    def __eq__(self, other):
        return isinstance(other, HardwareSpec) and self.table == other.table

    def __repr__(self):
        return f"HardwareSpec({ {op: [str(s) for s in sigs] for op, sigs in self.table.items()} })"

    def signatures(self, op: str) -> tuple[Signature, ...]:
        if op in self.table:
            return self.table[op]
        return _float_only(OPS[op].arity)

    def integer_signatures(self, op: str) -> list[Signature]:
        """Integer signatures, narrowest first (stable for equal widths)."""
        sigs = [s for s in self.signatures(op) if s.is_integer]
        return sorted(sigs, key=_narrowness)

    def to_json(self) -> dict:
        return {"ops": {op: [s.to_json() for s in sigs] for op, sigs in self.table.items()}}

    def dumps(self) -> str:
        return json.dumps(self.to_json(), indent=2)


def _narrowness(s: Signature):
    widths = [d.width for d in s.in_dtypes]
    return (max(widths, default=0), sum(widths), s.out_dtype.width)


def parse_spec(text: str | Mapping) -> HardwareSpec:
    """Parse a spec document (JSON text or an already-decoded mapping)."""
    if isinstance(text, str):
        doc = json.loads(text) if text.strip() else {}
    else:
        doc = text
    ops = doc.get("ops", {})
    if not isinstance(ops, Mapping):
        raise SpecError("'ops' must be an object")
    table = {}
    for op, entries in ops.items():
        if op not in SPEC_OPS:
            raise SpecError(f"unknown operator {op!r}")
        sigs = []
        for ent in entries:
            try:
                sigs.append(signature(ent["in"], ent["out"]))
            except ValueError as exc:
                raise SpecError(f"{op}: {exc}") from None
            except (KeyError, TypeError):
                raise SpecError(f"{op}: signature needs 'in' list and 'out' token") from None
        table[op] = sigs
    return HardwareSpec(table)


def classify_op(spec: HardwareSpec, op: str) -> OpClass:
    sigs = spec.signatures(op)
    if all(s.is_float for s in sigs):
        return OpClass.float_only
    if all(s.is_integer for s in sigs):
        return OpClass.integer_only
    return OpClass.mixed


def max_bits(dtype: DType | str) -> int:
    dtype = DType.parse(dtype)
    if dtype.is_float:
        raise TypeError("max_bits is defined for integer dtypes only")
    return dtype.width
