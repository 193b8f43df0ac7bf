"""Chronological DPLL over CNF with watched-literal unit propagation.

Variables are numbered 1..nvars; a clause is a tuple of non-zero ints where a
negative literal asserts "variable is false".  The engine is deterministic by
construction: decisions always pick the lowest-numbered unassigned variable
and try the caller's preferred polarity first, and propagation order is a
fixed function of the input.  ``minimize`` runs an exhaustive branch-and-bound
on the same search tree, so both entry points are complete.

A solver instance is single-shot: build one per problem.
"""

from __future__ import annotations

from typing import Callable, Iterable, Sequence

__all__ = ["DpllSolver"]


class DpllSolver:
    def __init__(self, nvars: int, clauses: Iterable[Sequence[int]]):
        self.nvars = nvars
        self.clauses = [tuple(c) for c in clauses]
        self.assign = [0] * (nvars + 1)  # 0 unassigned, 1 true, -1 false
        self.trail: list[int] = []
        self.queue: list[int] = []
        self.watch: dict[int, list[int]] = {}
        self.wpair: list[list[int]] = []
        self.units: list[int] = []
        self.false_clause = False
        self._used = False
        for idx, clause in enumerate(self.clauses):
            self.wpair.append(list(clause[:2]))
            if not clause:
                self.false_clause = True
            elif len(clause) == 1:
                self.units.append(clause[0])
            else:
                for lit in clause[:2]:
                    self.watch.setdefault(lit, []).append(idx)

    def _value(self, lit: int) -> int:
        v = self.assign[abs(lit)]
        if v == 0:
            return 0
        return 1 if (v > 0) == (lit > 0) else -1

    def _enqueue(self, lit: int) -> bool:
        val = self._value(lit)
        if val == 1:
            return True
        if val == -1:
            return False
        self.assign[abs(lit)] = 1 if lit > 0 else -1
        self.trail.append(abs(lit))
        self.queue.append(lit)
        return True

    def _propagate(self) -> bool:
        while self.queue:
            lit = self.queue.pop()
            falsified = -lit
            watchers = self.watch.get(falsified)
            if not watchers:
                continue
            keep: list[int] = []
            for pos, ci in enumerate(watchers):
                pair = self.wpair[ci]
                other = pair[0] if pair[1] == falsified else pair[1]
                if self._value(other) == 1:
                    keep.append(ci)
                    continue
                moved = False
                for cand in self.clauses[ci]:
                    if cand == other or cand == falsified:
                        continue
                    if self._value(cand) != -1:
                        if pair[0] == falsified:
                            pair[0] = cand
                        else:
                            pair[1] = cand
                        self.watch.setdefault(cand, []).append(ci)
                        moved = True
                        break
                if moved:
                    continue
                keep.append(ci)
                if not self._enqueue(other):
                    keep.extend(watchers[pos + 1:])
                    self.watch[falsified] = keep
                    self.queue.clear()
                    return False
            self.watch[falsified] = keep
        return True

    def _undo_to(self, mark: int) -> None:
        while len(self.trail) > mark:
            self.assign[self.trail.pop()] = 0
        self.queue.clear()

    def search(
        self,
        polarity: Sequence[bool] | None = None,
        on_model: Callable[[set[int]], bool] | None = None,
        prune: Callable[[list[int]], bool] | None = None,
    ) -> set[int] | None:
        """Depth-first search over all assignments.

        ``on_model(trueset)`` is called at each full model; return True to
        stop the search and hand that model back.  ``prune(assign)`` is
        consulted before expanding a node; return True to cut the branch.
        With both left as None this returns the first model found, or None
        when the formula is unsatisfiable.
        """
        if self._used:
            raise RuntimeError("solver instances are single-shot")
        self._used = True
        if self.false_clause:
            return None
        for lit in self.units:
            if not self._enqueue(lit):
                return None
        if not self._propagate():
            return None
        pol = list(polarity) if polarity is not None else [False] * (self.nvars + 1)
        decisions: list[list] = []  # [trail mark, literal, flipped?, scan position]
        scan = 1

        def backtrack() -> bool:
            nonlocal scan
            while decisions:
                mark, lit, flipped, saved = decisions.pop()
                self._undo_to(mark)
                if flipped:
                    continue
                decisions.append([mark, -lit, True, saved])
                if self._enqueue(-lit) and self._propagate():
                    scan = saved
                    return True
                # the flip conflicts immediately; next loop pops it as tried
            return False

        while True:
            if prune is not None and prune(self.assign):
                if not backtrack():
                    return None
                continue
            v = scan
            while v <= self.nvars and self.assign[v] != 0:
                v += 1
            if v > self.nvars:
                model = {i for i in range(1, self.nvars + 1) if self.assign[i] > 0}
                if on_model is None or on_model(model):
                    return model
                if not backtrack():
                    return None
                continue
            scan = v
            lit = v if pol[v] else -v
            decisions.append([len(self.trail), lit, False, v])
            if not (self._enqueue(lit) and self._propagate()):
                if not backtrack():
                    return None

    def solve(self, polarity: Sequence[bool] | None = None) -> set[int] | None:
        """First model (as the set of true variables), or None if unsatisfiable."""
        return self.search(polarity=polarity)

    def minimize(
        self,
        model_key: Callable[[set[int]], tuple],
        bound_key: Callable[[list[int]], tuple],
        polarity: Sequence[bool] | None = None,
    ) -> set[int] | None:
        """Exhaustive branch-and-bound for the model with the smallest key.

        ``bound_key(assign)`` must be a lower bound, in the same total order,
        on ``model_key`` of every model extending the partial assignment;
        branches whose bound is not below the incumbent are cut.  Returns the
        minimising model, or None when the formula is unsatisfiable.
        """
        best_key: list = [None]
        best_model: list = [None]

        def on_model(model: set[int]) -> bool:
            key = model_key(model)
            if best_key[0] is None or key < best_key[0]:
                best_key[0] = key
                best_model[0] = set(model)
            return False

        def prune(assign: list[int]) -> bool:
            return best_key[0] is not None and bound_key(assign) >= best_key[0]

        self.search(polarity=polarity, on_model=on_model, prune=prune)
        return best_model[0]
