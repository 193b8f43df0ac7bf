"""Maintainer scripts in a small DSL where every step can be undone.

The language is deliberately not Turing-complete: no loops, no conditionals,
no external commands.  One primitive per line; ``#`` starts a comment and
blank lines are ignored.  ``$PKG``, ``$OLD`` and ``$NEW`` in any argument are
substituted from the script environment at execution time.

Primitives::

    mkdir PATH                 create a directory (missing parents included)
    copy SRC DST               copy a store file over/onto DST
    remove PATH                delete a file
    append FILE LINE           append one line (file created if missing)
    setkey FILE KEY VALUE      set KEY in a key=value file (sorted, unique keys)
    delkey FILE KEY            drop KEY from a key=value file
    update-cache CACHE GLOB    rewrite CACHE as the sorted "path sha256" listing
                               of store files matching GLOB (idempotent)
    adduser NAME               add NAME to the user database (etc/users.db)
    deluser NAME               remove NAME from the user database
    fail MESSAGE               always fails (for testing failure handling)

Executing a program yields an effect log with one record per executed step,
carrying everything needed to compensate it; ``undo`` applies compensations
in reverse and restores the pre-execution store exactly.  All mutations run
through the open transaction, so a journal rollback is always an equivalent
alternative to compensation.
"""

from __future__ import annotations

import fnmatch
import hashlib
from dataclasses import dataclass

from .txn import Transaction
from .universe import MetadataError, check_rel_path

__all__ = [
    "ScriptSyntaxError",
    "ScriptFailure",
    "CorruptedLog",
    "Step",
    "ScriptProgram",
    "ScriptEnv",
    "StepEffect",
    "parse_script",
    "execute",
    "undo",
    "classify",
    "compute_cache",
    "USER_DB",
]

USER_DB = "etc/users.db"

# op -> (fixed argument count, does the last argument swallow the rest of the line)
_ARITY = {
    "mkdir": (1, False),
    "copy": (2, False),
    "remove": (1, False),
    "append": (2, True),
    "setkey": (3, True),
    "delkey": (2, False),
    "update-cache": (2, False),
    "adduser": (1, False),
    "deluser": (1, False),
    "fail": (1, True),
}

_PATH_ARGS = {
    "mkdir": (0,),
    "copy": (0, 1),
    "remove": (0,),
    "append": (0,),
    "setkey": (0,),
    "delkey": (0,),
    "update-cache": (0,),
}


class ScriptSyntaxError(ValueError):
    def __init__(self, message: str, line: int):
        super().__init__(f"line {line}: {message}")
        self.line = line


class CorruptedLog(Exception):
    """The store no longer matches what the effect log says a step left behind."""


class ScriptFailure(Exception):
    """A step failed; carries the effect log of the steps that did run."""

    def __init__(self, step_index: int, message: str, log=None):
        super().__init__(message)
        self.step_index = step_index
        self.message = message
        self.log = list(log) if log else []

    def __str__(self):
        return f"step {self.step_index}: {self.message}"


@dataclass(frozen=True)
class Step:
    op: str
    args: tuple[str, ...]
    line: int


@dataclass(frozen=True)
class ScriptProgram:
    steps: tuple[Step, ...]
    source_path: str = "<script>"


@dataclass(frozen=True)
class ScriptEnv:
    """Values exposed to the script as $PKG, $OLD, and $NEW."""

    package: str
    old_version: str | None = None
    new_version: str | None = None
    hook: str = "postinst"


@dataclass
class StepEffect:
    """Everything needed to compensate one executed step.

    ``post_sha`` fingerprints the target after the step so undo can detect
    external tampering; ``created_dirs`` lists directories the step created
    (outermost first).  ``flag`` is primitive-specific: for adduser/deluser it
    records whether the user existed beforehand.
    """

    index: int
    op: str
    path: str | None = None
    created: bool = False
    pre_image: bytes | None = None
    pre_mode: int | None = None
    post_sha: str | None = None
    created_dirs: tuple[str, ...] = ()
    detail: str | None = None
    flag: bool = False


def parse_script(text: str, source_path: str = "<script>") -> ScriptProgram:
    """Parse DSL text; rejects unknown primitives and arity mismatches."""
    steps = []
    for no, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        op = line.split(None, 1)[0]
        if op not in _ARITY:
            raise ScriptSyntaxError(f"unknown primitive {op!r}", no)
        count, greedy = _ARITY[op]
        if greedy:
            parts = line.split(None, count)
        else:
            parts = line.split()
        args = tuple(parts[1:])
        if len(args) != count:
            raise ScriptSyntaxError(
                f"{op} takes {count} argument{'s' if count != 1 else ''}, got {len(args)}", no)
        for pos in _PATH_ARGS.get(op, ()):
            if "$" not in args[pos]:  # substituted paths are re-checked at run time
                _check_path(args[pos], no)
        steps.append(Step(op, args, no))
    return ScriptProgram(tuple(steps))


def _check_path(path: str, line: int | None = None):
    try:
        check_rel_path(path)
    except MetadataError as e:
        if line is not None:
            raise ScriptSyntaxError(str(e), line) from None
        raise


def classify(program: ScriptProgram) -> str:
    """'cache-updater' when every step only refreshes caches or makes
    directories (the idempotent class), else 'general'."""
    if all(step.op in ("update-cache", "mkdir") for step in program.steps):
        return "cache-updater"
    return "general"


def _subst(token: str, env: ScriptEnv, index: int) -> str:
    out = token.replace("$PKG", env.package)
    for var, value in (("$OLD", env.old_version), ("$NEW", env.new_version)):
        if var in out:
            if value is None:
                raise ScriptFailure(index, f"{var} is not set for this hook")
            out = out.replace(var, value)
    return out


def _sha(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def compute_cache(txn: Transaction, cache_path: str, pattern: str) -> bytes:
    """Deterministic cache content: one ``path sha256`` line per matching file,
    sorted by path.  The cache file itself never matches its own glob."""
    lines = []
    for rel in txn.walk_files():
        if rel == cache_path or not fnmatch.fnmatchcase(rel, pattern):
            continue
        lines.append(f"{rel} {_sha(txn.read(rel))}\n")
    return "".join(lines).encode("utf-8")


def _parse_kv(data: bytes):
    """key=value lines -> dict, or None when the file is not in that shape."""
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


def _dump_kv(mapping: dict) -> bytes:
    return "".join(f"{k}={mapping[k]}\n" for k in sorted(mapping)).encode("utf-8")


def _file_snapshot(txn: Transaction, rel: str):
    kind, content, mode = txn.store.state(rel)
    if kind == "dir":
        raise ScriptFailure(-1, f"{rel!r} is a directory")
    return content, (mode if kind == "file" else None)


def _write_file(txn: Transaction, index: int, rel: str, data: bytes) -> StepEffect:
    pre, pre_mode = _file_snapshot(txn, rel)
    created_dirs = tuple(txn.ensure_parent(rel))
    txn.write_through(rel, data)
    return StepEffect(index=index, op="", path=rel, created=pre is None,
                      pre_image=pre, pre_mode=pre_mode, post_sha=_sha(data),
                      created_dirs=created_dirs)


def _load_users(txn: Transaction) -> tuple[set[str], bool]:
    data = txn.read_optional(USER_DB)
    if data is None:
        return set(), False
    names = {line.strip() for line in data.decode("utf-8").splitlines() if line.strip()}
    return names, True


def _dump_users(names: set[str]) -> bytes:
    return "".join(f"{n}\n" for n in sorted(names)).encode("utf-8")


def _run_step(index: int, step: Step, txn: Transaction, env: ScriptEnv) -> StepEffect:
    args = tuple(_subst(a, env, index) for a in step.args)
    for pos in _PATH_ARGS.get(step.op, ()):
        try:
            _check_path(args[pos])
        except MetadataError as e:
            raise ScriptFailure(index, str(e)) from None
    op = step.op

    if op == "fail":
        raise ScriptFailure(index, args[0])

    if op == "mkdir":
        target = args[0]
        if txn.exists(target) and not txn.is_dir(target):
            raise ScriptFailure(index, f"{target!r} exists and is not a directory")
        existed = txn.is_dir(target)
        created = tuple(txn.mkdir(target))
        return StepEffect(index=index, op=op, path=target, created=not existed,
                          created_dirs=created)

    if op == "copy":
        src, dst = args
        if not txn.exists(src) or txn.is_dir(src):
            raise ScriptFailure(index, f"source {src!r} is not a file")
        data = txn.read(src)
        eff = _write_file(txn, index, dst, data)
        eff.op = op
        eff.detail = src
        return eff

    if op == "remove":
        target = args[0]
        if not txn.exists(target) or txn.is_dir(target):
            raise ScriptFailure(index, f"{target!r} is not a file")
        pre, pre_mode = _file_snapshot(txn, target)
        txn.write_through(target, None)
        return StepEffect(index=index, op=op, path=target, pre_image=pre,
                          pre_mode=pre_mode, post_sha=None)

    if op == "append":
        target, line = args
        pre, pre_mode = _file_snapshot(txn, target)
        data = (pre or b"") + line.encode("utf-8") + b"\n"
        eff = _write_file(txn, index, target, data)
        eff.op = op
        eff.detail = line
        return eff

    if op in ("setkey", "delkey"):
        target = args[0]
        key = args[1]
        if "=" in key:
            raise ScriptFailure(index, f"key {key!r} may not contain '='")
        pre, pre_mode = _file_snapshot(txn, target)
        if op == "delkey" and pre is None:
            raise ScriptFailure(index, f"{target!r} does not exist")
        mapping = _parse_kv(pre) if pre is not None else {}
        if mapping is None:
            raise ScriptFailure(index, f"{target!r} is not a key=value file")
        if op == "setkey":
            mapping[key] = args[2]
        elif key in mapping:
            del mapping[key]
        else:
            # nothing to delete: record a no-op so the log stays one record per step
            return StepEffect(index=index, op=op, path=target, pre_image=pre,
                              pre_mode=pre_mode, post_sha=_sha(pre), detail=key)
        eff = _write_file(txn, index, target, _dump_kv(mapping))
        eff.op = op
        eff.detail = key
        return eff

    if op == "update-cache":
        cache, pattern = args
        content = compute_cache(txn, cache, pattern)
        eff = _write_file(txn, index, cache, content)
        eff.op = op
        eff.detail = pattern
        return eff

    if op in ("adduser", "deluser"):
        name = args[0]
        names, _existed = _load_users(txn)
        present = name in names
        if op == "adduser":
            names.add(name)
        else:
            names.discard(name)
        eff = _write_file(txn, index, USER_DB, _dump_users(names))
        eff.op = op
        eff.detail = name
        eff.flag = present
        return eff

    raise ScriptFailure(index, f"unknown primitive {op!r}")


def execute(program: ScriptProgram, txn: Transaction, env: ScriptEnv) -> list[StepEffect]:
    """Run the program in order inside the open transaction.

    Returns the effect log (one record per executed step).  On failure raises
    :class:`ScriptFailure` carrying the partial log of the steps that did run,
    so the caller can compensate (or just roll the transaction back).
    """
    log: list[StepEffect] = []
    for index, step in enumerate(program.steps):
        try:
            effect = _run_step(index, step, txn, env)
        except ScriptFailure as failure:
            failure.step_index = index
            failure.log = list(log)
            raise
        except OSError as e:
            raise ScriptFailure(index, f"io error: {e}", log) from e
        log.append(effect)
    return log


def _verify_post(eff: StepEffect, txn: Transaction) -> None:
    if eff.path is None:
        return
    if eff.op == "mkdir":
        for d in eff.created_dirs:
            if not txn.is_dir(d):
                raise CorruptedLog(f"step {eff.index}: directory {d!r} vanished")
        return
    current = txn.read_optional(eff.path)
    current_sha = None if current is None else _sha(current)
    if current_sha != eff.post_sha:
        raise CorruptedLog(
            f"step {eff.index}: {eff.path!r} changed since execution "
            f"(have {current_sha}, logged {eff.post_sha})")


def _remove_created_dirs(eff: StepEffect, txn: Transaction) -> None:
    for d in reversed(eff.created_dirs):
        if txn.is_dir(d):
            try:
                txn.rmdir(d)
            except OSError:
                raise CorruptedLog(f"step {eff.index}: directory {d!r} is not empty") from None


def _restore_file(eff: StepEffect, txn: Transaction) -> None:
    if eff.created:
        if txn.exists(eff.path):
            txn.write_through(eff.path, None)
    else:
        txn.write_through(eff.path, eff.pre_image, mode=eff.pre_mode)


def undo(log, txn: Transaction, cache_undo: str = "restore") -> None:
    """Apply compensations in reverse order.

    With ``cache_undo="restore"`` (the default) every step, caches included,
    is reverted to its exact pre-image, so execute-then-undo is the identity
    on the store.  With ``cache_undo="regen"`` an ``update-cache`` step is
    instead recomputed from whatever inputs currently match its glob (or the
    cache is deleted when the step created it); that is the sound choice when
    the cache aggregates inputs owned by other packages changed in the same
    transaction.  Raises :class:`CorruptedLog` when the store does not match
    the logged post-state.
    """
    if cache_undo not in ("restore", "regen"):
        raise ValueError(f"unknown cache undo mode {cache_undo!r}")
    for eff in reversed(list(log)):
        _verify_post(eff, txn)
        if eff.op == "mkdir":
            _remove_created_dirs(eff, txn)
        elif eff.op == "update-cache" and cache_undo == "regen":
            if eff.created:
                if txn.exists(eff.path):
                    txn.write_through(eff.path, None)
                _remove_created_dirs(eff, txn)
            else:
                txn.write_through(eff.path, compute_cache(txn, eff.path, eff.detail))
        elif eff.op in ("copy", "append", "setkey", "delkey", "update-cache"):
            _restore_file(eff, txn)
            _remove_created_dirs(eff, txn)
        elif eff.op == "remove":
            txn.write_through(eff.path, eff.pre_image, mode=eff.pre_mode)
        elif eff.op in ("adduser", "deluser"):
            if eff.created:
                if txn.exists(eff.path):
                    txn.write_through(eff.path, None)
                _remove_created_dirs(eff, txn)
            else:
                names, _ = _load_users(txn)
                if eff.op == "adduser" and not eff.flag:
                    names.discard(eff.detail)
                elif eff.op == "deluser" and eff.flag:
                    names.add(eff.detail)
                txn.write_through(eff.path, _dump_users(names), mode=eff.pre_mode)
        else:
            raise CorruptedLog(f"step {eff.index}: unknown effect {eff.op!r}")
