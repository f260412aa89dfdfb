"""Pure numpy versions of the hot loops. Same signatures as ``_ckernels``."""
import numpy as np
from scipy.linalg import lu_solve as _scipy_lu_solve


def lu_solve(lu, piv, b):
    """Solve in place using LAPACK-style factors from ``scipy.linalg.lu_factor``."""
    b[:] = _scipy_lu_solve((lu, piv), b, check_finite=False)


def emt_step(lu, piv, frm, to, tscale, G, P, Q, hist, emf, inj, v, ibr):
    """Advance one trapezoidal step of a block-companion network.

    Every block has three ports. Port voltage is ``v[frm] - tscale * v[to] - emf``;
    index -1 stands for ground. ``hist`` is updated in place, node voltages are
    written to ``v`` and port currents to ``ibr``.
    """
    n = v.shape[0]
    src = np.einsum("bij,bj->bi", G, emf) - hist
    rhs = inj.copy()
    # ground entries land in the dummy slot n and are dropped
    acc = np.zeros(n + 1)
    np.add.at(acc, frm.ravel(), src.ravel())
    np.add.at(acc, to.ravel(), -(tscale * src).ravel())
    rhs += acc[:n]
    v[:] = _scipy_lu_solve((lu, piv), rhs, check_finite=False)
    vx = np.append(v, 0.0)
    vp = vx[frm] - tscale * vx[to] - emf
    ibr[:] = np.einsum("bij,bj->bi", G, vp) + hist
    hist[:] = np.einsum("bij,bj->bi", P, vp) + np.einsum("bij,bj->bi", Q, ibr)


def ring_push(buf, cum, run, pos, new):
    """Store ``new`` in column ``pos`` of ``buf``, add it to the running total
    ``run`` and record that total in column ``pos`` of ``cum``."""
    run += new
    buf[:, pos] = new
    cum[:, pos] = run
