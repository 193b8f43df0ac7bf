"""Configuration file tracking and three-way merge.

Every conffile version a package ships is archived verbatim in a
content-addressed pristine store under ``.pkgdb/pristine/``.  On upgrade, the
pristine copy of the installed version serves as the merge base: unmodified
files simply take the incoming version, locally modified ones get a
line-oriented three-way merge (or a per-key merge for ``key=value`` files),
and overlapping edits surface as a conflict with the incoming version parked
next to the file as ``<path>.pkgnew``.  A conflict never aborts the upgrade.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from difflib import SequenceMatcher

from .txn import Store, Transaction
from .universe import Package

__all__ = [
    "ConfmergeError",
    "MergeOutcome",
    "PristineStore",
    "merge3",
    "structured_merge",
    "is_locally_modified",
    "upgrade_conffile",
    "PKGNEW_SUFFIX",
]

PKGNEW_SUFFIX = ".pkgnew"


class ConfmergeError(Exception):
    """Conffile bookkeeping errors (unregistered files, missing pristine data)."""


@dataclass(frozen=True)
class MergeOutcome:
    """Result of a merge.

    kind is one of ``kept-local``, ``took-new``, ``merged``, ``conflict``;
    ``conflict_hunks`` is non-empty exactly for conflicts and carries
    (base, local, incoming) byte triples; ``fell_back`` marks a structured
    merge that had to drop to plain line merging because an input did not
    parse.
    """

    kind: str
    content: bytes
    conflict_hunks: tuple = ()
    fell_back: bool = False


def _sha(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def _lines(data: bytes) -> list[bytes]:
    return data.splitlines(keepends=True)


def _is_text(data: bytes) -> bool:
    if b"\x00" in data:
        return False
    try:
        data.decode("utf-8")
    except UnicodeDecodeError:
        return False
    return True


def _sync_regions(base, local, incoming):
    """Regions where all three texts agree, as (base_lo, base_hi, local_lo, inc_lo)."""
    blocks_l = SequenceMatcher(None, base, local, autojunk=False).get_matching_blocks()
    blocks_i = SequenceMatcher(None, base, incoming, autojunk=False).get_matching_blocks()
    regions = []
    x = y = 0
    while x < len(blocks_l) and y < len(blocks_i):
        bl, ll, sl = blocks_l[x]
        bi, li, si = blocks_i[y]
        lo = max(bl, bi)
        hi = min(bl + sl, bi + si)
        if lo < hi:
            regions.append((lo, hi, ll + (lo - bl), li + (lo - bi)))
        if bl + sl < bi + si:
            x += 1
        elif bl + sl > bi + si:
            y += 1
        else:
            x += 1
            y += 1
    return regions


def merge3(base: bytes, local: bytes, incoming: bytes) -> MergeOutcome:
    """Line-oriented three-way merge.

    Changes relative to the base coming from exactly one side apply cleanly;
    regions changed differently on both sides become conflict hunks, rendered
    with conflict markers in the content.  Non-text input (NUL bytes or
    invalid UTF-8) is a whole-file conflict.
    """
    if local == base:
        return MergeOutcome("took-new", incoming)
    if incoming == base:
        return MergeOutcome("kept-local", local)
    if local == incoming:
        return MergeOutcome("merged", local)
    if not (_is_text(base) and _is_text(local) and _is_text(incoming)):
        content = (b"<<<<<<< local\n" + local + b"=======\n" + incoming + b">>>>>>> incoming\n")
        return MergeOutcome("conflict", content, ((base, local, incoming),))

    b, l, i = _lines(base), _lines(local), _lines(incoming)
    out: list[bytes] = []
    hunks: list[tuple[bytes, bytes, bytes]] = []
    pb = pl = pi = 0
    # the zero-width sentinel region flushes whatever trails the last real
    # sync region
    regions = _sync_regions(b, l, i) + [(len(b), len(b), len(l), len(i))]
    for base_lo, base_hi, local_lo, inc_lo in regions:
        base_chunk = b[pb:base_lo]
        local_chunk = l[pl:local_lo]
        inc_chunk = i[pi:inc_lo]
        if local_chunk == base_chunk:
            out.extend(inc_chunk)
        elif inc_chunk == base_chunk or local_chunk == inc_chunk:
            out.extend(local_chunk)
        else:
            hunks.append((b"".join(base_chunk), b"".join(local_chunk), b"".join(inc_chunk)))
            out.append(b"<<<<<<< local\n")
            out.extend(local_chunk)
            out.append(b"=======\n")
            out.extend(inc_chunk)
            out.append(b">>>>>>> incoming\n")
        out.extend(b[base_lo:base_hi])
        pb, pl, pi = base_hi, local_lo + (base_hi - base_lo), inc_lo + (base_hi - base_lo)
    content = b"".join(out)
    if hunks:
        return MergeOutcome("conflict", content, tuple(hunks))
    return MergeOutcome("merged", content)


def _parse_kv(data: bytes):
    try:
        text = data.decode("utf-8")
    except UnicodeDecodeError:
        return None
    out: dict[str, str] = {}
    for line in text.splitlines():
        if not line.strip():
            continue
        key, sep, value = line.partition("=")
        if not sep or not key or any(c.isspace() for c in key):
            return None
        if key in out:
            return None
        out[key] = value
    return out


def structured_merge(base: bytes, local: bytes, incoming: bytes,
                     syntax: str = "lines") -> MergeOutcome:
    """Merge with syntax awareness.

    ``lines`` is plain :func:`merge3`.  ``keyvalue`` merges per key over
    ``key=value`` files, so reordering lines is never a conflict; only the
    same key edited differently on both sides conflicts.  Output is always
    the canonical sorted rendering.  If any input fails to parse the merge
    falls back to lines mode with ``fell_back`` set.
    """
    if syntax == "lines":
        return merge3(base, local, incoming)
    if syntax != "keyvalue":
        raise ValueError(f"unknown merge syntax {syntax!r}")
    parsed_b, parsed_l, parsed_i = _parse_kv(base), _parse_kv(local), _parse_kv(incoming)
    if parsed_b is None or parsed_l is None or parsed_i is None:
        out = merge3(base, local, incoming)
        return MergeOutcome(out.kind, out.content, out.conflict_hunks, fell_back=True)

    if parsed_l == parsed_b:
        return MergeOutcome("took-new", _dump_kv(parsed_i))
    if parsed_i == parsed_b:
        return MergeOutcome("kept-local", _dump_kv(parsed_l))

    merged: dict[str, str] = {}
    conflicts: list[tuple[bytes, bytes, bytes]] = []
    conflict_keys: set[str] = set()
    for key in sorted(set(parsed_b) | set(parsed_l) | set(parsed_i)):
        vb, vl, vi = parsed_b.get(key), parsed_l.get(key), parsed_i.get(key)
        if vl == vb:
            chosen = vi
        elif vi == vb or vl == vi:
            chosen = vl
        else:
            conflict_keys.add(key)
            conflicts.append(tuple(
                b"" if v is None else f"{key}={v}\n".encode("utf-8") for v in (vb, vl, vi)))
            continue
        if chosen is not None:
            merged[key] = chosen

    if not conflicts:
        return MergeOutcome("merged", _dump_kv(merged))
    rendered: list[bytes] = []
    for key in sorted(set(merged) | conflict_keys):
        if key in conflict_keys:
            vl, vi = parsed_l.get(key), parsed_i.get(key)
            rendered.append(b"<<<<<<< local\n")
            if vl is not None:
                rendered.append(f"{key}={vl}\n".encode("utf-8"))
            rendered.append(b"=======\n")
            if vi is not None:
                rendered.append(f"{key}={vi}\n".encode("utf-8"))
            rendered.append(b">>>>>>> incoming\n")
        else:
            rendered.append(f"{key}={merged[key]}\n".encode("utf-8"))
    return MergeOutcome("conflict", b"".join(rendered), tuple(conflicts))


def _dump_kv(mapping: dict) -> bytes:
    return "".join(f"{k}={mapping[k]}\n" for k in sorted(mapping)).encode("utf-8")


class PristineStore:
    """Read access to the per-package archive of unmodified conffile versions.

    The index is an append-only JSON-lines file; contents live in a
    content-addressed object directory.  Writes go through the transaction
    (:meth:`txpkg.txn.Transaction.add_pristine`) so they commit and roll back
    with the upgrade that made them.
    """

    def __init__(self, store: Store):
        self._dir = store.root / ".pkgdb" / "pristine"

    def entries(self, pkg_name: str, path: str) -> list[dict]:
        index = self._dir / "index"
        if not index.is_file():
            return []
        out = []
        for line in index.read_text(encoding="utf-8").splitlines():
            if not line.strip():
                continue
            rec = json.loads(line)
            if rec["pkg"] == pkg_name and rec["path"] == path:
                out.append(rec)
        return out

    def latest(self, pkg_name: str, path: str) -> dict | None:
        found = self.entries(pkg_name, path)
        return found[-1] if found else None

    def content(self, sha: str) -> bytes:
        obj = self._dir / "objects" / sha
        if not obj.is_file():
            raise ConfmergeError(f"pristine object {sha} missing")
        return obj.read_bytes()


def is_locally_modified(store: Store, pkg: Package, path: str) -> bool:
    """Has the conffile been edited since its pristine version was installed?

    Compares content hashes; a deleted conffile counts as modified.  Raises
    :class:`ConfmergeError` for paths that are not registered conffiles.
    """
    if path not in pkg.conffiles:
        raise ConfmergeError(f"{path!r} is not a conffile of {pkg.id}")
    latest = PristineStore(store).latest(pkg.name, path)
    if latest is None:
        raise ConfmergeError(f"{path!r} has no pristine record for {pkg.name}")
    current = store.read_optional(path)
    return current is None or _sha(current) != latest["sha"]


def upgrade_conffile(store: Store, txn: Transaction, pkg: Package, path: str,
                     incoming: bytes, policy: str = "auto") -> MergeOutcome:
    """Bring one conffile to the incoming version inside an open transaction.

    Policy ``auto``: an unmodified (or never-seen) file takes the incoming
    content; a modified one is three-way merged against the pristine copy of
    the installed version.  On conflict the file keeps its local content and
    the incoming version is written alongside as ``<path>.pkgnew``; the
    transaction carries on.  ``keep`` and ``new`` force one side.  Whatever
    happens, the incoming content is registered as the new pristine version
    and every write is journaled.
    """
    if policy not in ("auto", "keep", "new"):
        raise ValueError(f"unknown conffile policy {policy!r}")
    if path not in pkg.conffiles:
        raise ConfmergeError(f"{path!r} is not a conffile of {pkg.id}")
    pristine = PristineStore(store)
    latest = pristine.latest(pkg.name, path)
    current = txn.read_optional(path)

    def register() -> None:
        txn.add_pristine(pkg.name, path, str(pkg.version), incoming)

    def write(data: bytes) -> None:
        txn.ensure_parent(path)
        txn.write_through(path, data)

    if policy == "new" or current is None and latest is None:
        write(incoming)
        register()
        return MergeOutcome("took-new", incoming)
    if policy == "keep":
        register()
        return MergeOutcome("kept-local", current if current is not None else b"")

    if latest is None:
        # an unowned file already sits where a fresh conffile should go
        if current == incoming:
            write(incoming)
            register()
            return MergeOutcome("took-new", incoming)
        txn.ensure_parent(path)
        txn.write_through(path + PKGNEW_SUFFIX, incoming)
        register()
        return MergeOutcome("conflict", current, ((b"", current, incoming),))

    if current is None:
        # locally deleted conffiles stay deleted
        register()
        return MergeOutcome("kept-local", b"")
    if _sha(current) == latest["sha"]:
        write(incoming)
        register()
        return MergeOutcome("took-new", incoming)

    base = pristine.content(latest["sha"])
    outcome = structured_merge(base, current, incoming, pkg.syntax_for(path))
    if outcome.kind == "conflict":
        txn.ensure_parent(path)
        txn.write_through(path + PKGNEW_SUFFIX, incoming)
    else:
        write(outcome.content)
    register()
    return outcome
