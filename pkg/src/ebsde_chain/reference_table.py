"""Published four-decimal values for the rate-uncertainty example on the 4-state path chain.

Each row is ``(zeta, v, lam, pi_zeta)`` with ``zeta`` a tuple of 0-based
state indices, ``v`` the zero-sum relative value and ``beta = 2``.
"""

BETA = 2.0

ROWS = (
    ((), (0.0, 0.0, 0.0, 0.0), 0.0, 0.0),
    ((0,), (0.1207, -0.0172, -0.0517, -0.0517), 0.0345, 0.125),
    ((1,), (-0.0652, 0.1087, -0.0217, -0.0217), 0.1304, 0.375),
    ((0, 1), (0.1000, 0.1000, -0.1000, -0.1000), 0.2000, 0.500),
    ((0, 2), (0.1500, -0.0500, 0.0500, -0.1500), 0.2000, 0.500),
    ((0, 3), (0.0769, -0.0769, -0.0769, 0.0769), 0.0769, 0.250),
    ((1, 2), (-0.1429, 0.1429, 0.1429, -0.1429), 0.4286, 0.750),
    ((0, 1, 2), (0.1364, 0.1364, 0.0455, -0.3182), 0.6364, 0.875),
    ((0, 1, 3), (0.0294, 0.0294, -0.1471, 0.0882), 0.2941, 0.625),
    ((0, 1, 2, 3), (0.0, 0.0, 0.0, 0.0), 1.0, 1.0),
)

ZETAS = tuple(row[0] for row in ROWS)


def zeta_label(zeta) -> str:
    """1-based set notation, e.g. ``{e1,e2}``."""
    return "{" + ",".join(f"e{i + 1}" for i in zeta) + "}"
