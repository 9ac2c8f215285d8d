import logging
from functools import lru_cache
from math import comb
from typing import Optional, Sequence, Tuple

import numpy as np
from numpy.polynomial import legendre
from numpy.polynomial import polynomial as P

from ..core.config import settings
from ..core.exceptions import DegenerateElementException, QuadratureException
from ..models.data_models import (
    EdgeQuadrature,
    ElementGeometry,
    HarmonicGradientBasis,
    PolygonQuadrature,
)
from .mesh_service import MeshService

logger = logging.getLogger(__name__)


@lru_cache(maxsize=64)
def _unit_gauss(n_points: int) -> Tuple[np.ndarray, np.ndarray]:
    """[0,1] 上のガウス・ルジャンドル節点と重み"""
    nodes, weights = legendre.leggauss(n_points)
    return 0.5 * (nodes + 1.0), 0.5 * weights


def _pad(coefficients: np.ndarray, size: int) -> np.ndarray:
    """係数テンソルを (size, size) にゼロ詰め"""
    out = np.zeros(coefficients.shape[:-2] + (size, size))
    a, b = coefficients.shape[-2:]
    out[..., :a, :b] = coefficients
    return out


def harmonic_coefficients(k: int) -> np.ndarray:
    """Re/Im (m_x + i m_y)^m, m=1..k の単項式係数 (2k, k+1, k+1)"""
    coefficients = np.zeros((2 * k, k + 1, k + 1))
    for m in range(1, k + 1):
        for b in range(m + 1):
            term = comb(m, b) * (1j ** b)
            coefficients[2 * (m - 1), m - b, b] = term.real
            coefficients[2 * (m - 1) + 1, m - b, b] = term.imag
    return coefficients


def laplacian_coefficients(coefficients: np.ndarray) -> np.ndarray:
    """係数レベルのラプラシアン（スケール座標）"""
    size = coefficients.shape[-1]
    dxx = P.polyder(coefficients, m=2, axis=-2)
    dyy = P.polyder(coefficients, m=2, axis=-1)
    return _pad(dxx, size) + _pad(dyy, size)


class HarmonicBasisService:
    """調和多項式基底と1次元・多角形求積を担当するサービス"""

    def __init__(self, mesh_service: Optional[MeshService] = None):
        self.mesh_service = mesh_service or MeshService()
        self.exactness = settings.quadrature_exactness
        self.condition_limit = settings.gram_condition_limit

    def harmonic_basis(self, geom: ElementGeometry, k: int) -> HarmonicGradientBasis:
        """((x-x_E)+i(y-y_E))^m / h_E^m の実部・虚部による 2k 個の基底"""
        if k < 1:
            raise ValueError(f"次数 k は1以上が必要です: {k}")
        coefficients = harmonic_coefficients(k)
        size = k + 1
        grad_x = _pad(P.polyder(coefficients, axis=-2), size) / geom.diameter
        grad_y = _pad(P.polyder(coefficients, axis=-1), size) / geom.diameter
        return HarmonicGradientBasis(
            degree=k,
            geometry=geom,
            coefficients=coefficients,
            grad_x_coefficients=grad_x,
            grad_y_coefficients=grad_y,
        )

    @staticmethod
    def scaled_coordinates(basis: HarmonicGradientBasis, points: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        geom = basis.geometry
        shifted = (np.asarray(points, dtype=float) - geom.centroid) / geom.diameter
        return shifted[..., 0], shifted[..., 1]

    def evaluate(self, basis: HarmonicGradientBasis, points: np.ndarray) -> np.ndarray:
        """全基底の点値 (2k, n_points)"""
        mx, my = self.scaled_coordinates(basis, points)
        return np.array([P.polyval2d(mx, my, c) for c in basis.coefficients])

    def gradient(self, basis: HarmonicGradientBasis, points: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        """物理座標での勾配 (∂x p_i, ∂y p_i)、各 (2k, n_points)"""
        mx, my = self.scaled_coordinates(basis, points)
        gx = np.array([P.polyval2d(mx, my, c) for c in basis.grad_x_coefficients])
        gy = np.array([P.polyval2d(mx, my, c) for c in basis.grad_y_coefficients])
        return gx, gy

    @staticmethod
    def laplacian(basis: HarmonicGradientBasis) -> np.ndarray:
        return laplacian_coefficients(basis.coefficients)

    @staticmethod
    def edge_gauss(edge_endpoints: Sequence[Sequence[float]], n_points: int) -> EdgeQuadrature:
        """線分上のガウス則（2n-1 次まで正確）"""
        if n_points < 1:
            raise QuadratureException(f"ガウス点数は1以上が必要です: {n_points}")
        a, b = (np.asarray(p, dtype=float) for p in edge_endpoints)
        nodes, weights = _unit_gauss(n_points)
        length = float(np.hypot(*(b - a)))
        return EdgeQuadrature(
            points=a + nodes[:, None] * (b - a),
            weights=weights * length,
            order=2 * n_points - 1,
        )

    def fan_point(self, geom: ElementGeometry) -> np.ndarray:
        """扇形分割の中心：重心が核の内部ならば重心、そうでなければ核のチェビシェフ中心"""
        margin = 1e-12 * geom.diameter
        if self.mesh_service.in_kernel(geom, geom.centroid, margin):
            return geom.centroid
        center, radius = self.mesh_service.kernel_center(geom)
        if radius <= margin:
            raise QuadratureException("多角形が星形ではないため扇形分割の中心が見つかりません")
        return center

    def polygon_quadrature(self, geom: ElementGeometry, exactness: Optional[int] = None) -> PolygonQuadrature:
        """扇形三角形分割と円錐積ガウス則による多角形求積"""
        degree = exactness if exactness is not None else self.exactness
        if degree < 0:
            raise QuadratureException(f"正確次数が負です: {degree}")
        # ヤコビアンの s で s 方向の次数が1上がる
        n = (degree + 3) // 2
        nodes, weights = _unit_gauss(n)
        # 縮退座標 (s, t) ∈ [0,1]²、ヤコビアン s·2|T|
        s, t = np.meshgrid(nodes, nodes, indexing="ij")
        ws = np.outer(weights, weights) * s
        s, t, ws = s.ravel(), t.ravel(), ws.ravel()

        center = self.fan_point(geom)
        coords = geom.vertex_coords
        nxt = np.roll(coords, -1, axis=0)
        points, point_weights = [], []
        for a, b in zip(coords, nxt):
            da, db = a - center, b - center
            twice_area = da[0] * db[1] - da[1] * db[0]
            local = center + s[:, None] * ((1.0 - t)[:, None] * da + t[:, None] * db)
            points.append(local)
            point_weights.append(ws * twice_area)

        return PolygonQuadrature(
            points=np.vstack(points),
            weights=np.concatenate(point_weights),
            exactness=degree,
            fan_point=np.asarray(center),
        )

    def _check_gram(self, G: np.ndarray) -> np.ndarray:
        condition = float(np.linalg.cond(G))
        if not np.isfinite(condition) or condition > self.condition_limit:
            raise DegenerateElementException(
                f"グラム行列が数値的に特異です（条件数 {condition:.3e}）", condition=condition
            )
        return G

    def gram_matrix_boundary(self, basis: HarmonicGradientBasis) -> np.ndarray:
        """G_ij = Σ_e ∫_e p_i (∇p_j·n) ds（境界積分のみ）"""
        geom = basis.geometry
        coords = geom.vertex_coords
        nxt = np.roll(coords, -1, axis=0)
        G = np.zeros((basis.size, basis.size))
        for j in range(geom.n_edges):
            rule = self.edge_gauss((coords[j], nxt[j]), basis.degree + 1)
            values = self.evaluate(basis, rule.points)
            gx, gy = self.gradient(basis, rule.points)
            normal = geom.outward_normals[j]
            flux = gx * normal[0] + gy * normal[1]
            G += (values * rule.weights) @ flux.T
        return self._check_gram(0.5 * (G + G.T))

    def gram_matrix_area(self, basis: HarmonicGradientBasis) -> np.ndarray:
        """G_ij = ∫_E ∇p_i·∇p_j dA（内部求積）"""
        rule = self.polygon_quadrature(basis.geometry, max(2 * basis.degree - 2, 0))
        gx, gy = self.gradient(basis, rule.points)
        G = (gx * rule.weights) @ gx.T + (gy * rule.weights) @ gy.T
        return self._check_gram(G)

    def member_integrals(self, basis: HarmonicGradientBasis) -> np.ndarray:
        """全基底の ∫_E p_i dA"""
        rule = self.polygon_quadrature(basis.geometry, max(basis.degree, 1))
        return self.evaluate(basis, rule.points) @ rule.weights

    def integrate_harmonic_over_element(self, basis: HarmonicGradientBasis, member: int) -> float:
        """基底 p_member の要素積分"""
        if not 0 <= member < basis.size:
            raise IndexError(f"基底番号が範囲外です: {member}")
        return float(self.member_integrals(basis)[member])
