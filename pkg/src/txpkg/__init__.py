"""Transactional package upgrade engine over a sandboxed filesystem root.

The modules follow the life of an upgrade:

- :mod:`txpkg.universe`: repository metadata, versions, installed status
- :mod:`txpkg.resolver`: complete decision of upgrade requests (DPLL)
- :mod:`txpkg.preferences`: lexicographic choice among acceptable outcomes
- :mod:`txpkg.mscript`: maintainer scripts in an undoable DSL
- :mod:`txpkg.txn`: copy-before-write journal, commit/rollback, history
- :mod:`txpkg.confmerge`: pristine tracking and three-way config merge
- :mod:`txpkg.planner`: phased execution with whole-plan atomicity
- :mod:`txpkg.cli`: the ``txpkg`` command
"""

__version__ = "0.1.0"

from .universe import (  # noqa: F401
    Atom,
    MetadataError,
    Package,
    PackageId,
    Status,
    Universe,
    Version,
    compare_versions,
    parse_status,
    parse_universe,
    satisfies,
    serialize_status,
    serialize_universe,
)
from .resolver import (  # noqa: F401
    Request,
    RequestError,
    Solution,
    Unsat,
    Verdict,
    check_solution,
    encode,
    health_check,
    parse_request,
    solve,
)
from .preferences import (  # noqa: F401
    PreferenceSpec,
    eval_criteria,
    optimize,
    parse_prefs,
)
from .mscript import (  # noqa: F401
    ScriptEnv,
    ScriptFailure,
    ScriptProgram,
    classify,
    execute,
    parse_script,
    undo,
)
from .txn import Store, Transaction  # noqa: F401
from .confmerge import merge3, structured_merge, upgrade_conffile  # noqa: F401
from .planner import Outcome, Plan, execute_plan, plan, retrieve, simulate  # noqa: F401
