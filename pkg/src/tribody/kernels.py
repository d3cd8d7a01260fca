"""Select the integration kernel backend at import.

The compiled ``_cstep`` extension is used when it is importable; otherwise the
pure-Python ``_pystep`` mirror is used.  ``TRIBODY_PURE=1`` forces the fallback.
Both modules expose the same names, re-exported here.
"""
import os

from . import _pystep

if os.environ.get("TRIBODY_PURE", "") == "1":
    _backend = _pystep
else:
    try:
        from . import _cstep as _backend
    except ImportError:  # extension not built
        _backend = _pystep

BACKEND = "compiled" if _backend is not _pystep else "python"

rhs = _backend.rhs
event_value = _backend.event_value
dense_eval = _backend.dense_eval
Stepper = _backend.Stepper

MODE_JACOBI = _pystep.MODE_JACOBI
MODE_MCGEHEE = _pystep.MODE_MCGEHEE
EV_V = _pystep.EV_V
EV_R = _pystep.EV_R
EV_RHO = _pystep.EV_RHO
EV_PAIR = _pystep.EV_PAIR
EV_TIME = _pystep.EV_TIME
STATUS_END = _pystep.STATUS_END
STATUS_EVENT = _pystep.STATUS_EVENT
STATUS_FULL = _pystep.STATUS_FULL
STATUS_UNDERFLOW = _pystep.STATUS_UNDERFLOW
STATUS_BUDGET = _pystep.STATUS_BUDGET
STATUS_SINGULAR = _pystep.STATUS_SINGULAR

python_backend = _pystep
