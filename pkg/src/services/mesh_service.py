import json
import logging
from pathlib import Path
from typing import Dict, List, Sequence, Tuple

import numpy as np
from scipy.optimize import linprog
from scipy.spatial.distance import pdist

from ..core.exceptions import DegenerateCellException, GeometryException, MeshException, TopologyException
from ..models.data_models import ElementGeometry, PolygonalMesh, RegularityReport

logger = logging.getLogger(__name__)

# 面積ゼロ判定（直径²に対する相対値）
_AREA_EPS = 1e-14


def signed_area(coords: np.ndarray) -> float:
    """靴ひも公式による符号付き面積"""
    x, y = coords[:, 0], coords[:, 1]
    return 0.5 * float(np.dot(x, np.roll(y, -1)) - np.dot(np.roll(x, -1), y))


def _orient(a: np.ndarray, b: np.ndarray, c: np.ndarray) -> float:
    return float((b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0]))


def _on_segment(a: np.ndarray, b: np.ndarray, c: np.ndarray) -> bool:
    return (min(a[0], b[0]) <= c[0] <= max(a[0], b[0])
            and min(a[1], b[1]) <= c[1] <= max(a[1], b[1]))


def _segments_intersect(p1, p2, q1, q2) -> bool:
    d1 = _orient(q1, q2, p1)
    d2 = _orient(q1, q2, p2)
    d3 = _orient(p1, p2, q1)
    d4 = _orient(p1, p2, q2)
    if d1 * d2 < 0 and d3 * d4 < 0:
        return True
    if d1 == 0 and _on_segment(q1, q2, p1):
        return True
    if d2 == 0 and _on_segment(q1, q2, p2):
        return True
    if d3 == 0 and _on_segment(p1, p2, q1):
        return True
    if d4 == 0 and _on_segment(p1, p2, q2):
        return True
    return False


def is_simple_polygon(coords: np.ndarray) -> bool:
    """隣接しない辺同士が交差しないか"""
    n = coords.shape[0]
    for i in range(n):
        a, b = coords[i], coords[(i + 1) % n]
        for j in range(i + 1, n):
            if j == i or (j + 1) % n == i or (i + 1) % n == j:
                continue
            if _segments_intersect(a, b, coords[j], coords[(j + 1) % n]):
                return False
    return True


class MeshService:
    """多角形メッシュの位相・幾何・正則性・入出力を担当するサービス"""

    def build_topology(
        self,
        raw_vertices: Sequence[Sequence[float]],
        raw_cells: Sequence[Sequence[int]]
    ) -> PolygonalMesh:
        """頂点とセルループから辺表と向き符号を構築"""
        vertices = np.asarray(raw_vertices, dtype=float)
        if vertices.ndim != 2 or vertices.shape[1] != 2:
            raise TopologyException(f"頂点配列の形状が不正です: {vertices.shape}")
        n_vertices = vertices.shape[0]

        cells: List[Tuple[int, ...]] = []
        reoriented: List[int] = []
        for c, raw_loop in enumerate(raw_cells):
            loop = [int(i) for i in raw_loop]
            if len(loop) < 3:
                raise TopologyException(f"セル {c} の頂点数が3未満です")
            if any(i < 0 or i >= n_vertices for i in loop):
                raise TopologyException(f"セル {c} が存在しない頂点を参照しています")
            if len(set(loop)) != len(loop):
                raise TopologyException(f"セル {c} のループに重複頂点があります")

            coords = vertices[loop]
            area = signed_area(coords)
            scale = float(np.ptp(coords, axis=0).max())
            if abs(area) <= _AREA_EPS * scale * scale:
                raise DegenerateCellException(f"セル {c} の面積がゼロです", cell=c)
            if not is_simple_polygon(coords):
                raise TopologyException(f"セル {c} が自己交差しています")
            if area < 0:
                loop = loop[::-1]
                reoriented.append(c)
            cells.append(tuple(loop))

        edge_index: Dict[Tuple[int, int], int] = {}
        edges: List[Tuple[int, int]] = []
        incidences: List[List[Tuple[int, int]]] = []
        cell_edges = []
        for c, loop in enumerate(cells):
            entries = []
            n = len(loop)
            for j in range(n):
                a, b = loop[j], loop[(j + 1) % n]
                key = (min(a, b), max(a, b))
                e = edge_index.get(key)
                if e is None:
                    e = len(edges)
                    edge_index[key] = e
                    edges.append(key)
                    incidences.append([])
                # 反時計回りループでは a<b のとき外向き法線が大域法線と一致
                sign = 1 if a < b else -1
                entries.append((e, sign))
                incidences[e].append((c, sign))
            cell_edges.append(tuple(entries))

        for e, adj in enumerate(incidences):
            if len(adj) > 2:
                raise TopologyException(f"辺 {edges[e]} が3つ以上のセルに共有されています")
            if len(adj) == 2 and adj[0][1] + adj[1][1] != 0:
                raise TopologyException(f"辺 {edges[e]} の向き符号が整合しません（セル重なり）")

        edge_array = np.array(edges, dtype=int).reshape(-1, 2)
        tangents = vertices[edge_array[:, 1]] - vertices[edge_array[:, 0]]
        lengths = np.hypot(tangents[:, 0], tangents[:, 1])
        # 低番号→高番号の単位接線を時計回りに90°回転
        normals = np.column_stack([tangents[:, 1], -tangents[:, 0]]) / lengths[:, None]

        if reoriented:
            logger.info(f"時計回りのセルを反転しました: {len(reoriented)}個")

        for array in (vertices, edge_array, normals, lengths):
            array.setflags(write=False)

        return PolygonalMesh(
            vertices=vertices,
            cells=tuple(cells),
            edges=edge_array,
            edge_normals=normals,
            edge_lengths=lengths,
            cell_edges=tuple(cell_edges),
            edge_cells=tuple(tuple(c for c, _ in adj) for adj in incidences),
            reoriented_cells=tuple(reoriented),
        )

    @staticmethod
    def geometry_from_coords(coords: np.ndarray, cell: int = -1) -> ElementGeometry:
        """反時計回りの頂点列から要素幾何量を計算"""
        coords = np.asarray(coords, dtype=float)
        nxt = np.roll(coords, -1, axis=0)
        cross = coords[:, 0] * nxt[:, 1] - nxt[:, 0] * coords[:, 1]
        area = 0.5 * float(cross.sum())
        diameter = float(pdist(coords).max())
        if area <= _AREA_EPS * diameter * diameter:
            raise DegenerateCellException(f"セル {cell} が退化しています（面積 {area:.3e}）", cell=cell)

        centroid = ((coords + nxt) * cross[:, None]).sum(axis=0) / (6.0 * area)
        edge_vectors = nxt - coords
        lengths = np.hypot(edge_vectors[:, 0], edge_vectors[:, 1])
        normals = np.column_stack([edge_vectors[:, 1], -edge_vectors[:, 0]]) / lengths[:, None]

        return ElementGeometry(
            area=area,
            centroid=centroid,
            diameter=diameter,
            vertex_coords=coords,
            edge_lengths=lengths,
            outward_normals=normals,
            edge_midpoints=0.5 * (coords + nxt),
        )

    def element_geometry(self, mesh: PolygonalMesh, cell: int) -> ElementGeometry:
        """セルの面積・重心・直径・辺情報"""
        if not 0 <= cell < mesh.n_cells:
            raise MeshException(f"セル番号が範囲外です: {cell}")
        return self.geometry_from_coords(mesh.cell_coordinates(cell), cell=cell)

    def element_geometries(self, mesh: PolygonalMesh) -> List[ElementGeometry]:
        return [self.element_geometry(mesh, c) for c in range(mesh.n_cells)]

    @staticmethod
    def is_convex(geom: ElementGeometry) -> bool:
        edges = np.roll(geom.vertex_coords, -1, axis=0) - geom.vertex_coords
        turns = edges[:, 0] * np.roll(edges[:, 1], -1) - edges[:, 1] * np.roll(edges[:, 0], -1)
        return bool(np.all(turns > -_AREA_EPS * geom.diameter ** 2))

    @staticmethod
    def in_kernel(geom: ElementGeometry, point: np.ndarray, margin: float = 0.0) -> bool:
        """点が全ての辺の内側半平面に（margin 以上離れて）含まれるか"""
        offsets = np.einsum("ij,ij->i", geom.outward_normals, point[None, :] - geom.vertex_coords)
        return bool(np.all(offsets < -margin))

    @staticmethod
    def kernel_center(geom: ElementGeometry) -> Tuple[np.ndarray, float]:
        """多角形の核のチェビシェフ中心と内接半径（線形計画）"""
        normals = geom.outward_normals
        A_ub = np.column_stack([normals, np.ones(geom.n_edges)])
        b_ub = np.einsum("ij,ij->i", normals, geom.vertex_coords)
        result = linprog(
            c=[0.0, 0.0, -1.0],
            A_ub=A_ub,
            b_ub=b_ub,
            bounds=[(None, None), (None, None), (0.0, None)],
            method="highs",
        )
        if not result.success or result.x[2] <= 0.0:
            logger.warning("星形中心を見つけられませんでした（核が空）")
            return geom.centroid.copy(), 0.0
        return np.asarray(result.x[:2]), float(result.x[2])

    @staticmethod
    def midpoint_parallelogram(geom: ElementGeometry) -> Tuple[np.ndarray, float]:
        """四角形の辺中点 M_1..M_4 が張る平行四辺形 K_E と符号付き面積（|K_E| = |E|/2）"""
        if geom.n_edges != 4:
            raise GeometryException(f"中点平行四辺形は四角形でのみ定義されます（辺数 {geom.n_edges}）")
        mids = np.asarray(geom.edge_midpoints)
        return mids, signed_area(mids)

    def check_regularity(self, mesh: PolygonalMesh) -> RegularityReport:
        """辺長比と星形半径の下限を推定（棄却はしない）"""
        gamma_edge = np.inf
        gamma_star = np.inf
        worst_cell = 0
        n_nonconvex = 0
        for c in range(mesh.n_cells):
            geom = self.element_geometry(mesh, c)
            ratio = float(geom.edge_lengths.min()) / geom.diameter
            if ratio < gamma_edge:
                gamma_edge = ratio
                worst_cell = c
            _, radius = self.kernel_center(geom)
            gamma_star = min(gamma_star, radius / geom.diameter)
            if not self.is_convex(geom):
                n_nonconvex += 1

        return RegularityReport(
            gamma_edge=float(gamma_edge),
            gamma_star=float(gamma_star),
            worst_cell=worst_cell,
            n_nonconvex=n_nonconvex,
        )

    def load_mesh(self, path: str) -> PolygonalMesh:
        """JSONメッシュファイルを読み込み位相を再構築"""
        file_path = Path(path)
        if not file_path.exists():
            raise MeshException(f"メッシュファイルが見つかりません: {file_path}")
        try:
            with open(file_path, "r", encoding="utf-8") as file:
                data = json.load(file)
            mesh = self.build_topology(data["vertices"], data["cells"])
        except (json.JSONDecodeError, KeyError, TypeError) as e:
            raise MeshException(f"メッシュファイルの形式が不正です: {str(e)}")
        logger.info(f"メッシュを読み込みました: {file_path} ({mesh.n_cells}セル)")
        return mesh

    def save_mesh(self, mesh: PolygonalMesh, path: str) -> Path:
        """JSONメッシュファイルを書き出す"""
        file_path = Path(path)
        file_path.parent.mkdir(parents=True, exist_ok=True)
        data = {
            "vertices": [[float(x), float(y)] for x, y in mesh.vertices],
            "cells": [list(loop) for loop in mesh.cells],
        }
        with open(file_path, "w", encoding="utf-8") as file:
            json.dump(data, file)
            file.write("\n")
        logger.info(f"メッシュを書き出しました: {file_path}")
        return file_path
