"""Upgrade-problem resolution: requests, solution checking, CNF encoding, solving.

A candidate status S is acceptable for a universe U, an initial status S0,
and a request R when:

(a) every request atom holds in S,
(b) every installed package has each of its dependency clauses satisfied by
    some member of S, and
(c) no installed package conflicts with another installed package.

``solve`` is complete: it never reports unsatisfiable when an acceptable
status exists.  It returns an arbitrary acceptable status; picking the best
one is the optimizer's job (see txpkg.preferences).
"""

from __future__ import annotations

import re
from dataclasses import dataclass

from .sat import DpllSolver
from .universe import (
    Atom,
    Package,
    PackageId,
    Status,
    Universe,
    Version,
    VersionConstraint,
    MetadataError,
    OPERATORS,
)

__all__ = [
    "RequestError",
    "RequestAtom",
    "Request",
    "Violation",
    "Verdict",
    "Solution",
    "Unsat",
    "Cnf",
    "parse_request",
    "check_solution",
    "encode",
    "solve",
    "health_check",
]

ACTIONS = ("install", "remove", "upgrade")

_REQ_ATOM_RE = re.compile(
    r"(install|remove|upgrade)\s+([a-z0-9][a-z0-9.+-]*)\s*"
    r"(?:\(\s*([<>=]{1,2})\s*([^\s()]+)\s*\))?$"
)


class RequestError(ValueError):
    """Malformed or self-contradictory request text."""


@dataclass(frozen=True)
class RequestAtom:
    action: str
    name: str
    constraint: VersionConstraint | None = None

    def __str__(self):
        base = f"{self.action} {self.name}"
        return base if self.constraint is None else f"{base} ({self.constraint})"


@dataclass(frozen=True)
class Request:
    """Conjunction of install/remove/upgrade atoms."""

    atoms: tuple[RequestAtom, ...]

    def __str__(self):
        return ", ".join(str(a) for a in self.atoms)


def parse_request(text: str) -> Request:
    """Parse ``install|remove|upgrade name [(op version)]`` atoms joined by commas.

    Rejects requests where one name is asked to be both removed and
    installed/upgraded.
    """
    atoms = []
    for chunk in text.split(","):
        chunk = chunk.strip()
        if not chunk:
            continue
        m = _REQ_ATOM_RE.match(chunk)
        if not m:
            raise RequestError(f"bad request atom {chunk!r}")
        action, name, op, ver = m.groups()
        constraint = None
        if op is not None:
            if op not in OPERATORS:
                raise RequestError(f"bad operator {op!r} in {chunk!r}")
            try:
                constraint = VersionConstraint(op, Version(ver))
            except MetadataError as e:
                raise RequestError(str(e)) from None
        atoms.append(RequestAtom(action, name, constraint))
    if not atoms:
        raise RequestError("empty request")
    actions_by_name: dict[str, set[str]] = {}
    for atom in atoms:
        actions_by_name.setdefault(atom.name, set()).add(atom.action)
    for name, acts in actions_by_name.items():
        if "remove" in acts and acts & {"install", "upgrade"}:
            raise RequestError(f"contradictory actions for {name!r}")
    return Request(tuple(atoms))


@dataclass(frozen=True)
class Violation:
    condition: str  # "a", "b", or "c"
    witness: str


@dataclass(frozen=True)
class Verdict:
    ok: bool
    violations: tuple[Violation, ...] = ()


@dataclass(frozen=True)
class Solution:
    """An acceptable status plus the record of which conditions were checked."""

    status: Status
    certified: tuple[str, ...] = ("a", "b", "c")


@dataclass(frozen=True)
class Unsat:
    """Proof stub for an unsatisfiable request.

    ``doomed_atoms`` lists request atoms that are provably unsatisfiable on
    their own (no candidate exists, or no candidate is installable);
    ``witnesses`` carries one human-readable line per doomed atom.  An empty
    ``doomed_atoms`` means the atoms only clash in combination.
    """

    request: Request
    doomed_atoms: tuple[RequestAtom, ...] = ()
    witnesses: tuple[str, ...] = ()


# --- request atom candidate sets ----------------------------------------------

def _install_candidates(u: Universe, atom: RequestAtom) -> tuple[Package, ...]:
    """Packages able to satisfy an install atom.

    An unversioned atom is satisfied by a package of that name or by any
    provider of the feature; a versioned atom only by a real package whose
    version the constraint admits.
    """
    found: dict[PackageId, Package] = {}
    for pkg in u.by_name(atom.name):
        if atom.constraint is None or atom.constraint.admits(pkg.id.version):
            found[pkg.id] = pkg
    if atom.constraint is None:
        for pkg, _version in u.providers_of(atom.name):
            found.setdefault(pkg.id, pkg)
    return tuple(found[k] for k in sorted(found, key=lambda i: i.key))


def _remove_targets(u: Universe, atom: RequestAtom) -> tuple[Package, ...]:
    """Packages a remove atom forbids: same name, constraint admitted (if any)."""
    return tuple(pkg for pkg in u.by_name(atom.name)
                 if atom.constraint is None or atom.constraint.admits(pkg.id.version))


def _upgrade_candidates(u: Universe, s0: Status, atom: RequestAtom) -> tuple[Package, ...]:
    """Packages able to satisfy an upgrade atom.

    When the name is installed, only real packages at a version at least the
    highest installed one qualify; otherwise upgrade degrades to install.
    """
    floor = s0.max_version(atom.name)
    if floor is None:
        return _install_candidates(u, atom)
    return tuple(pkg for pkg in u.by_name(atom.name)
                 if pkg.id.version >= floor
                 and (atom.constraint is None or atom.constraint.admits(pkg.id.version)))


def _request_candidates(u: Universe, s0: Status, atom: RequestAtom) -> tuple[Package, ...]:
    if atom.action == "install":
        return _install_candidates(u, atom)
    if atom.action == "upgrade":
        return _upgrade_candidates(u, s0, atom)
    return _remove_targets(u, atom)


def _render_clause(clause: tuple[Atom, ...]) -> str:
    return " | ".join(str(a) for a in clause)


def check_solution(u: Universe, s: Status, r: Request, s0: Status | None = None) -> Verdict:
    """Re-checkable verdict on conditions (a)-(c) for a candidate status.

    ``s0`` supplies the pre-upgrade status that 'upgrade' atoms are judged
    against; omit it for requests without upgrade atoms.
    """
    for pid in s.installed:
        if pid not in u:
            raise ValueError(f"status is not a subset of the universe: {pid}")
    if s0 is None:
        s0 = Status()
    violations: list[Violation] = []

    for atom in r.atoms:
        if atom.action == "remove":
            for pkg in _remove_targets(u, atom):
                if pkg.id in s.installed:
                    violations.append(Violation("a", f"'{atom}' violated by installed {pkg.id}"))
        else:
            cands = _request_candidates(u, s0, atom)
            if not any(pkg.id in s.installed for pkg in cands):
                violations.append(Violation("a", f"'{atom}' not satisfied"))

    for pid in sorted(s.installed, key=lambda i: i.key):
        pkg = u.get(pid)
        for clause in pkg.rel.depends:
            met = False
            for atom in clause:
                for q in u.satisfiers(atom):
                    if q.id in s.installed:
                        met = True
                        break
                if met:
                    break
            if not met:
                violations.append(
                    Violation("b", f"{pid}: dependency clause '{_render_clause(clause)}' unmet"))

    for pid in sorted(s.installed, key=lambda i: i.key):
        for atom in u.get(pid).rel.conflicts:
            for q in u.satisfiers(atom):
                # a conflict atom also hits providers of the feature, but
                # never the declaring package itself
                if q.id != pid and q.id in s.installed:
                    violations.append(Violation("c", f"{pid} conflicts with {q.id} via '{atom}'"))

    return Verdict(not violations, tuple(violations))


@dataclass
class Cnf:
    """Propositional encoding: one variable per package id, numbered by sorted order."""

    ids: tuple[PackageId, ...]
    var_of: dict
    clauses: list

    def status_of(self, model: set[int]) -> Status:
        return Status(frozenset(self.ids[i - 1] for i in model))


def encode(u: Universe, s0: Status, r: Request) -> Cnf:
    """Encode the upgrade problem; models are exactly the acceptable statuses.

    Clause shapes: for each package p and dependency clause c,
    ``(not p) or (some satisfier of c)``; for each conflict pair,
    ``(not p) or (not q)``; install/upgrade atoms become at-least-one clauses
    over their candidates (an atom with no candidate yields the empty clause,
    making the formula trivially false); remove atoms become unit negations
    of every matching package.
    """
    ids = u.ids
    var_of = {pid: i + 1 for i, pid in enumerate(ids)}
    clauses: list[tuple[int, ...]] = []
    seen: set[tuple[int, ...]] = set()

    def add(lits) -> None:
        t = tuple(sorted(set(lits)))
        if t not in seen:
            seen.add(t)
            clauses.append(t)

    for pid in ids:
        pkg = u.get(pid)
        vp = var_of[pid]
        for clause in pkg.rel.depends:
            sats = {var_of[q.id] for atom in clause for q in u.satisfiers(atom)}
            add([-vp] + sorted(sats))
        for atom in pkg.rel.conflicts:
            for q in u.satisfiers(atom):
                if q.id != pid:
                    add([-vp, -var_of[q.id]])

    for atom in r.atoms:
        if atom.action == "remove":
            for pkg in _remove_targets(u, atom):
                add([-var_of[pkg.id]])
        else:
            add([var_of[pkg.id] for pkg in _request_candidates(u, s0, atom)])

    return Cnf(ids, var_of, clauses)


def solve(u: Universe, s0: Status, r: Request) -> Solution | Unsat:
    """Find some acceptable status, or prove there is none.

    Complete by construction (exhaustive DPLL).  The returned status is the
    first model under the fixed search order (lowest package id first, 'not
    installed' tried before 'installed'), re-verified with check_solution
    before being handed back.
    """
    cnf = encode(u, s0, r)
    model = DpllSolver(len(cnf.ids), cnf.clauses).solve()
    if model is None:
        return explain_unsat(u, s0, r)
    solution = Solution(cnf.status_of(model))
    verdict = check_solution(u, solution.status, r, s0)
    if not verdict.ok:
        raise RuntimeError(f"solver produced an invalid status: {verdict.violations[0].witness}")
    return solution


def _installable(u: Universe, pkg: Package) -> bool:
    r = Request((RequestAtom("install", pkg.id.name, VersionConstraint("=", pkg.id.version)),))
    cnf = encode(u, Status(), r)
    return DpllSolver(len(cnf.ids), cnf.clauses).solve() is not None


def explain_unsat(u: Universe, s0: Status, r: Request) -> Unsat:
    """Build the Unsat stub: flag request atoms that are doomed on their own."""
    doomed, witnesses = [], []
    for atom in r.atoms:
        if atom.action == "remove":
            continue
        cands = _request_candidates(u, s0, atom)
        if not cands:
            doomed.append(atom)
            witnesses.append(f"'{atom}': no candidate in the universe")
        elif all(not _installable(u, pkg) for pkg in cands):
            doomed.append(atom)
            witnesses.append(f"'{atom}': no candidate is installable")
    return Unsat(r, tuple(doomed), tuple(witnesses))


def health_check(u: Universe) -> list[tuple[PackageId, Verdict]]:
    """Installability report for every package in the universe.

    A package is healthy when some subset of the universe contains it while
    satisfying every dependency clause and avoiding all conflicts; decided
    with the same complete solver pinned to that exact version.
    """
    out: list[tuple[PackageId, Verdict]] = []
    for pid in u.ids:
        r = Request((RequestAtom("install", pid.name, VersionConstraint("=", pid.version)),))
        cnf = encode(u, Status(), r)
        model = DpllSolver(len(cnf.ids), cnf.clauses).solve()
        if model is not None:
            out.append((pid, Verdict(True)))
            continue
        witness = None
        for clause in u.get(pid).rel.depends:
            if not any(u.satisfiers(atom) for atom in clause):
                witness = Violation(
                    "b", f"{pid}: dependency clause '{_render_clause(clause)}' has no candidates")
                break
        if witness is None:
            witness = Violation("c", f"{pid}: no conflict-free dependency closure exists")
        out.append((pid, Verdict(False, (witness,))))
    return out
