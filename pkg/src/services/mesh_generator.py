import logging
from typing import List, Optional, Sequence, Tuple

import numpy as np
from scipy.spatial import Voronoi, cKDTree
from tenacity import Retrying, before_sleep_log, retry_if_exception_type, stop_after_attempt

from ..core.config import settings
from ..core.exceptions import (
    MeshException,
    MeshGenerationException,
    MeshSizeException,
    ValidationException,
)
from ..models.data_models import PolygonalMesh
from .mesh_service import MeshService, is_simple_polygon, signed_area

logger = logging.getLogger(__name__)

# ボロノイ頂点の同一視と境界への吸着に使う距離
_MERGE_TOL = 1e-10


def _grid(nx: int, ny: int) -> Tuple[np.ndarray, List[List[int]]]:
    """(0,1)² 上の nx×ny 格子の頂点とセル（左下から反時計回り）"""
    xs = np.linspace(0.0, 1.0, nx + 1)
    ys = np.linspace(0.0, 1.0, ny + 1)
    X, Y = np.meshgrid(xs, ys)
    vertices = np.column_stack([X.ravel(), Y.ravel()])

    def v(i: int, j: int) -> int:
        return j * (nx + 1) + i

    cells = [
        [v(i, j), v(i + 1, j), v(i + 1, j + 1), v(i, j + 1)]
        for j in range(ny)
        for i in range(nx)
    ]
    return vertices, cells


class MeshGenerator:
    """5つのメッシュ族と異方細分を生成するサービス"""

    def __init__(self, mesh_service: Optional[MeshService] = None):
        self.mesh_service = mesh_service or MeshService()
        self.max_cells = settings.max_cells
        self.voronoi_retries = settings.voronoi_retries

    def _check_size(self, n_cells: int) -> None:
        if n_cells > self.max_cells:
            raise MeshSizeException(
                f"セル数 {n_cells} が上限 {self.max_cells} を超えています"
            )

    def _build(self, vertices: np.ndarray, cells: Sequence[Sequence[int]], family: str) -> PolygonalMesh:
        """生成した頂点配置を検査して位相を構築"""
        for c, loop in enumerate(cells):
            coords = vertices[list(loop)]
            if signed_area(coords) <= 0.0:
                raise MeshGenerationException(f"{family}: セル {c} が反転しています")
            if not is_simple_polygon(coords):
                raise MeshGenerationException(f"{family}: セル {c} が自己交差しています")
        try:
            mesh = self.mesh_service.build_topology(vertices, cells)
        except MeshException as e:
            raise MeshGenerationException(f"{family}: 位相の構築に失敗しました: {str(e)}")
        logger.info(f"メッシュを生成しました: {family} ({mesh.n_cells}セル, {mesh.n_edges}辺)")
        return mesh

    def generate_cartesian(self, n: int) -> PolygonalMesh:
        """n×n の一様正方形メッシュ"""
        if n < 1:
            raise ValidationException(f"n は1以上が必要です: {n}")
        self._check_size(n * n)
        vertices, cells = _grid(n, n)
        return self._build(vertices, cells, "cartesian")

    def generate_convex_concave(self, n: int, delta: float = 0.2) -> PolygonalMesh:
        """2×2 マクロブロック中心頂点を対角方向に動かした凸・凹混在メッシュ

        ブロック中心をチェッカーボード状に ±3δ/n だけ対角線方向へ移動する。
        δ > 1/6 で各ブロックの1セルが凹四角形になる。
        """
        if n < 2 or n % 2:
            raise ValidationException(f"convex_concave は2以上の偶数 n が必要です: {n}")
        if not 0.0 <= delta < 0.5:
            raise ValidationException(f"delta は [0, 0.5) の範囲が必要です: {delta}")
        self._check_size(n * n)

        vertices, cells = _grid(n, n)
        shift = 3.0 * delta / n
        for bj in range(n // 2):
            for bi in range(n // 2):
                sign = 1.0 if (bi + bj) % 2 == 0 else -1.0
                index = (2 * bj + 1) * (n + 1) + (2 * bi + 1)
                vertices[index] += sign * shift
        return self._build(vertices, cells, "convex_concave")

    def generate_distorted(self, n: int, amplitude: float = 0.1) -> PolygonalMesh:
        """正弦写像で歪めた四角形メッシュ（境界は固定）"""
        if n < 1:
            raise ValidationException(f"n は1以上が必要です: {n}")
        if not 0.0 <= amplitude <= 0.3:
            raise ValidationException(f"amplitude は [0, 0.3] の範囲が必要です: {amplitude}")
        self._check_size(n * n)

        vertices, cells = _grid(n, n)
        a = amplitude / n
        x, y = vertices[:, 0], vertices[:, 1]
        bump = a * np.sin(2.0 * np.pi * x) * np.sin(2.0 * np.pi * y)
        # sin(2π) の丸め誤差で境界が動かないようにする
        interior = (x > 0.0) & (x < 1.0) & (y > 0.0) & (y < 1.0)
        bump = np.where(interior, bump, 0.0)
        vertices = np.column_stack([x + bump, y + bump])
        return self._build(vertices, cells, "distorted")

    def generate_random_voronoi(
        self,
        n_seeds: int,
        lloyd_iters: int = 20,
        rng_seed: int = 0
    ) -> PolygonalMesh:
        """ロイド緩和したランダムボロノイメッシュ（失敗時は種をずらして再生成）"""
        if n_seeds < 4:
            raise ValidationException(f"n_seeds は4以上が必要です: {n_seeds}")
        self._check_size(n_seeds)

        for attempt in Retrying(
            stop=stop_after_attempt(self.voronoi_retries),
            retry=retry_if_exception_type(MeshGenerationException),
            before_sleep=before_sleep_log(logger, logging.WARNING),
            reraise=True,
        ):
            with attempt:
                offset = attempt.retry_state.attempt_number - 1
                rng = np.random.default_rng(rng_seed + 7919 * offset)
                seeds = rng.uniform(0.0, 1.0, size=(n_seeds, 2))
                return self.voronoi_from_seeds(seeds, lloyd_iters)

    def _voronoi_polygons(self, seeds: np.ndarray) -> List[np.ndarray]:
        """4辺への鏡映で (0,1)² にクリップしたボロノイセル"""
        x, y = seeds[:, 0], seeds[:, 1]
        mirrored = np.vstack([
            seeds,
            np.column_stack([-x, y]),
            np.column_stack([2.0 - x, y]),
            np.column_stack([x, -y]),
            np.column_stack([x, 2.0 - y]),
        ])
        try:
            vor = Voronoi(mirrored)
        except Exception as e:
            raise MeshGenerationException(f"ボロノイ図の計算に失敗しました: {str(e)}")

        polygons = []
        for i, seed in enumerate(seeds):
            region = vor.regions[vor.point_region[i]]
            if not region or -1 in region or len(region) < 3:
                raise MeshGenerationException(f"種点 {i} のボロノイセルが閉じていません")
            coords = vor.vertices[region]
            # qhull の頂点順は不定なので種点まわりの角度で並べる
            angles = np.arctan2(coords[:, 1] - seed[1], coords[:, 0] - seed[0])
            polygons.append(coords[np.argsort(angles)])
        return polygons

    def voronoi_from_seeds(self, seeds: np.ndarray, lloyd_iters: int = 0) -> PolygonalMesh:
        """与えた種点からボロノイメッシュを構築"""
        seeds = np.array(seeds, dtype=float)
        for _ in range(lloyd_iters):
            polygons = self._voronoi_polygons(seeds)
            seeds = np.array([
                self.mesh_service.geometry_from_coords(poly).centroid for poly in polygons
            ])
        polygons = self._voronoi_polygons(seeds)

        points = np.vstack(polygons)
        points = np.where(np.abs(points) < _MERGE_TOL, 0.0, points)
        points = np.where(np.abs(points - 1.0) < _MERGE_TOL, 1.0, points)

        tree = cKDTree(points)
        representative = np.array([
            min(tree.query_ball_point(p, _MERGE_TOL)) for p in points
        ])
        unique_reps, compact = np.unique(representative, return_inverse=True)
        vertices = points[unique_reps]

        cells = []
        offset = 0
        for c, poly in enumerate(polygons):
            loop = [int(i) for i in compact[offset:offset + len(poly)]]
            offset += len(poly)
            deduped = [v for j, v in enumerate(loop) if v != loop[j - 1]]
            if len(deduped) < 3:
                raise MeshGenerationException(f"ボロノイセル {c} が退化しています")
            cells.append(deduped)

        return self._build(vertices, cells, "random")

    def generate_rhomboidal(self, nx: int, ny: int, shear: float = 0.5) -> PolygonalMesh:
        """直交格子を (x, y) ↦ ((x + shear·y)/(1 + shear), y) で写した合同な平行四辺形メッシュ

        領域は (0,0), (1/(1+shear),0), (1,1), (shear/(1+shear),1) を頂点とする平行四辺形で、
        外接矩形が (0,1)² になる。
        """
        if nx < 1 or ny < 1:
            raise ValidationException(f"nx, ny は1以上が必要です: {nx}, {ny}")
        if not 0.0 <= shear < 1.0:
            raise ValidationException(f"shear は [0, 1) の範囲が必要です: {shear}")
        self._check_size(nx * ny)

        vertices, cells = _grid(nx, ny)
        vertices[:, 0] = (vertices[:, 0] + shear * vertices[:, 1]) / (1.0 + shear)
        return self._build(vertices, cells, "rhomboidal")

    def refine_anisotropic(
        self,
        nx: int,
        ny: int,
        step: int,
        alpha: int = 2,
        shear: float = 0.5
    ) -> PolygonalMesh:
        """x 方向に α^s、y 方向に α^{2s} 倍細分した菱形メッシュ"""
        if step < 0 or alpha < 1:
            raise ValidationException(f"step ≥ 0, alpha ≥ 1 が必要です: {step}, {alpha}")
        fine_nx = nx * alpha ** step
        fine_ny = ny * alpha ** (2 * step)
        self._check_size(fine_nx * fine_ny)
        return self.generate_rhomboidal(fine_nx, fine_ny, shear)

    def generate_random_quadrilateral(
        self,
        rng: np.random.Generator,
        min_gamma: float = 0.2,
        max_tries: int = 100
    ) -> PolygonalMesh:
        """回転・拡大・平行移動したランダムな形状正則凸四角形（1セル）"""
        square = np.array([[0.0, 0.0], [1.0, 0.0], [1.0, 1.0], [0.0, 1.0]])
        for _ in range(max_tries):
            corners = square + rng.uniform(-0.2, 0.2, size=(4, 2))
            theta = rng.uniform(0.0, 2.0 * np.pi)
            rotation = np.array([[np.cos(theta), -np.sin(theta)],
                                 [np.sin(theta), np.cos(theta)]])
            scale = 10.0 ** rng.uniform(-1.0, 0.5)
            coords = scale * corners @ rotation.T + rng.uniform(-2.0, 2.0, size=2)

            if signed_area(coords) <= 0.0:
                continue
            geom = self.mesh_service.geometry_from_coords(coords)
            if not self.mesh_service.is_convex(geom):
                continue
            if geom.edge_lengths.min() / geom.diameter < min_gamma:
                continue
            return self.mesh_service.build_topology(coords, [[0, 1, 2, 3]])

        raise MeshGenerationException(
            f"gamma_edge ≥ {min_gamma} の四角形を {max_tries} 回で生成できませんでした"
        )
