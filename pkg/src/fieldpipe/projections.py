"""Forward map projections for metric shape statistics.

Supports the transverse Mercator family (UTM zones, TM35FIN, LKS-92) via
the fourth-order Krueger series and Lambert conformal conic (2SP) for the
Austrian lambert grid. Only the forward direction is implemented; the
pipeline never unprojects. Datum shifts are not applied: coordinates are
treated as referenced to the projection ellipsoid, which is exact for the
WGS84/GRS80 systems and leaves the (sub-200 m) MGI datum offset out of the
Austrian grid. Shape statistics are translation-invariant, so this does not
affect them.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np


class ProjectionError(ValueError):
    """Raised for unsupported CRS identifiers."""


@dataclass(frozen=True)
class Ellipsoid:
    a: float  # semi-major axis, meters
    inv_f: float  # inverse flattening

    @property
    def f(self) -> float:
        return 1.0 / self.inv_f

    @property
    def e2(self) -> float:
        return self.f * (2.0 - self.f)

    @property
    def n(self) -> float:
        return self.f / (2.0 - self.f)


WGS84 = Ellipsoid(6_378_137.0, 298.257223563)
GRS80 = Ellipsoid(6_378_137.0, 298.257222101)
BESSEL_1841 = Ellipsoid(6_377_397.155, 299.1528128)


@dataclass(frozen=True)
class TransverseMercator:
    ellipsoid: Ellipsoid
    lon0_deg: float
    k0: float
    false_easting: float
    false_northing: float

    def __call__(self, lon, lat):
        ell = self.ellipsoid
        n = ell.n
        lon = np.asarray(lon, dtype=np.float64)
        lat = np.asarray(lat, dtype=np.float64)
        phi = np.radians(lat)
        dlam = np.radians(lon - self.lon0_deg)

        # conformal latitude
        c = 2.0 * math.sqrt(n) / (1.0 + n)
        t = np.sinh(np.arctanh(np.sin(phi)) - c * np.arctanh(c * np.sin(phi)))
        xi_p = np.arctan2(t, np.cos(dlam))
        eta_p = np.arctanh(np.sin(dlam) / np.sqrt(1.0 + t * t))

        a1 = n / 2 - 2 * n**2 / 3 + 5 * n**3 / 16 + 41 * n**4 / 180
        a2 = 13 * n**2 / 48 - 3 * n**3 / 5 + 557 * n**4 / 1440
        a3 = 61 * n**3 / 240 - 103 * n**4 / 140
        a4 = 49561 * n**4 / 161280
        alphas = (a1, a2, a3, a4)

        xi = xi_p.copy()
        eta = eta_p.copy()
        for j, alpha in enumerate(alphas, start=1):
            xi += alpha * np.sin(2 * j * xi_p) * np.cosh(2 * j * eta_p)
            eta += alpha * np.cos(2 * j * xi_p) * np.sinh(2 * j * eta_p)

        big_a = ell.a / (1.0 + n) * (1.0 + n**2 / 4 + n**4 / 64)
        easting = self.false_easting + self.k0 * big_a * eta
        northing = self.false_northing + self.k0 * big_a * xi
        return easting, northing


@dataclass(frozen=True)
class LambertConformalConic2SP:
    ellipsoid: Ellipsoid
    lon0_deg: float
    lat0_deg: float
    sp1_deg: float
    sp2_deg: float
    false_easting: float
    false_northing: float

    def __call__(self, lon, lat):
        ell = self.ellipsoid
        e = math.sqrt(ell.e2)

        def m(phi):
            return math.cos(phi) / math.sqrt(1 - ell.e2 * math.sin(phi) ** 2)

        def t_of(phi):
            s = np.sin(phi)
            return np.tan(math.pi / 4 - phi / 2) / ((1 - e * s) / (1 + e * s)) ** (e / 2)

        phi1 = math.radians(self.sp1_deg)
        phi2 = math.radians(self.sp2_deg)
        phi0 = math.radians(self.lat0_deg)
        n = (math.log(m(phi1)) - math.log(m(phi2))) / (
            math.log(t_of(phi1)) - math.log(t_of(phi2))
        )
        big_f = m(phi1) / (n * t_of(phi1) ** n)
        rho0 = ell.a * big_f * t_of(phi0) ** n

        lon = np.asarray(lon, dtype=np.float64)
        lat = np.asarray(lat, dtype=np.float64)
        phi = np.radians(lat)
        theta = n * (np.radians(lon) - math.radians(self.lon0_deg))
        rho = ell.a * big_f * t_of(phi) ** n
        easting = self.false_easting + rho * np.sin(theta)
        northing = self.false_northing + rho0 - rho * np.cos(theta)
        return easting, northing


_FIXED_CRS = {
    # TM35FIN on GRS80
    3067: TransverseMercator(GRS80, 27.0, 0.9996, 500_000.0, 0.0),
    # LKS-92 Latvia TM on GRS80
    3059: TransverseMercator(GRS80, 24.0, 0.9996, 500_000.0, -6_000_000.0),
    # Austria Lambert on Bessel 1841 (MGI datum shift not applied)
    31287: LambertConformalConic2SP(BESSEL_1841, 13.0 + 1 / 3, 47.5, 49.0, 46.0, 400_000.0, 400_000.0),
}


def projector(crs: str):
    """Forward (lon, lat) -> (easting, northing) transform for a metric CRS."""
    try:
        authority, code_text = crs.split(":")
        code = int(code_text)
    except ValueError:
        raise ProjectionError(f"cannot parse CRS identifier {crs!r}") from None
    if authority.upper() != "EPSG":
        raise ProjectionError(f"only EPSG CRS identifiers are supported, got {crs!r}")
    if code in _FIXED_CRS:
        return _FIXED_CRS[code]
    if 32601 <= code <= 32660:  # UTM north on WGS84
        zone = code - 32600
        return TransverseMercator(WGS84, 6.0 * zone - 183.0, 0.9996, 500_000.0, 0.0)
    if 32701 <= code <= 32760:  # UTM south on WGS84
        zone = code - 32700
        return TransverseMercator(WGS84, 6.0 * zone - 183.0, 0.9996, 500_000.0, 10_000_000.0)
    raise ProjectionError(f"no projection parameters registered for {crs!r}")
