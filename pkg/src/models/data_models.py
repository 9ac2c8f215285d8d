from typing import Callable, Dict, List, Literal, Optional, Tuple

import numpy as np
import scipy.sparse as sp
from scipy.spatial.distance import pdist
from pydantic import BaseModel, ConfigDict, Field, model_validator

Method = Literal["stabfree", "drecipe"]
MeshFamily = Literal["cartesian", "convex_concave", "distorted", "random", "rhomboidal"]
ERROR_NAMES = ("err_u", "err_div", "err_sigma", "err_sigma_n")


class ArrayModel(BaseModel):
    """numpy配列を保持する不変モデルの基底"""
    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)


# ---------------------------------------------------------------- mesh

class PolygonalMesh(ArrayModel):
    """多角形メッシュ（構築後は不変）"""
    vertices: np.ndarray = Field(..., description="頂点座標 (n_vertices, 2)")
    cells: Tuple[Tuple[int, ...], ...] = Field(..., description="反時計回りの頂点インデックスループ")
    edges: np.ndarray = Field(..., description="辺 (vmin, vmax) の配列 (n_edges, 2)")
    edge_normals: np.ndarray = Field(..., description="辺の大域単位法線 (n_edges, 2)")
    edge_lengths: np.ndarray = Field(..., description="辺の長さ")
    cell_edges: Tuple[Tuple[Tuple[int, int], ...], ...] = Field(
        ..., description="セルごとの (辺番号, 向き符号±1) の列"
    )
    edge_cells: Tuple[Tuple[int, ...], ...] = Field(..., description="辺ごとの隣接セル")
    reoriented_cells: Tuple[int, ...] = Field((), description="時計回り入力から反転したセル")

    @property
    def n_vertices(self) -> int:
        return int(self.vertices.shape[0])

    @property
    def n_cells(self) -> int:
        return len(self.cells)

    @property
    def n_edges(self) -> int:
        return int(self.edges.shape[0])

    @property
    def boundary_edges(self) -> np.ndarray:
        return np.array([e for e, adj in enumerate(self.edge_cells) if len(adj) == 1], dtype=int)

    def cell_coordinates(self, cell: int) -> np.ndarray:
        return self.vertices[list(self.cells[cell])]

    @property
    def h(self) -> float:
        """最大セル直径"""
        return max(float(pdist(self.cell_coordinates(c)).max()) for c in range(self.n_cells))


class ElementGeometry(ArrayModel):
    """要素の幾何量"""
    area: float = Field(..., gt=0.0, description="面積 |E|")
    centroid: np.ndarray = Field(..., description="重心 (x_E, y_E)")
    diameter: float = Field(..., gt=0.0, description="直径 h_E")
    vertex_coords: np.ndarray = Field(..., description="頂点 V_j (n_E, 2)")
    edge_lengths: np.ndarray = Field(..., description="辺長 |e_j|")
    outward_normals: np.ndarray = Field(..., description="外向き単位法線 n_j (n_E, 2)")
    edge_midpoints: np.ndarray = Field(..., description="辺中点 M_j (n_E, 2)")

    @property
    def n_edges(self) -> int:
        return int(self.edge_lengths.shape[0])


class RegularityReport(BaseModel):
    """メッシュ正則性の診断結果"""
    gamma_edge: float = Field(..., description="min_E min_e |e|/h_E")
    gamma_star: float = Field(..., description="min_E（核の内接円半径 / h_E）")
    worst_cell: int = Field(..., description="gamma_edge を与えるセル")
    n_nonconvex: int = Field(0, description="非凸セル数")


# ---------------------------------------------------------------- polybasis

class HarmonicGradientBasis(ArrayModel):
    """調和多項式（次数1..k）のスケール基底"""
    degree: int = Field(..., ge=1, description="次数 k")
    geometry: ElementGeometry = Field(..., description="対象要素")
    coefficients: np.ndarray = Field(..., description="単項式 m_x^a m_y^b の係数 (2k, k+1, k+1)")
    grad_x_coefficients: np.ndarray = Field(..., description="物理座標での x 微分の係数")
    grad_y_coefficients: np.ndarray = Field(..., description="物理座標での y 微分の係数")

    @property
    def size(self) -> int:
        return 2 * self.degree


class EdgeQuadrature(ArrayModel):
    """辺上のガウス・ルジャンドル則"""
    points: np.ndarray = Field(..., description="節点 (n, 2)")
    weights: np.ndarray = Field(..., description="|e| でスケールした重み")
    order: int = Field(..., description="正確次数 2n-1")


class PolygonQuadrature(ArrayModel):
    """多角形上の扇形分割求積則"""
    points: np.ndarray = Field(..., description="節点 (n, 2)")
    weights: np.ndarray = Field(..., description="重み（総和は |E|）")
    exactness: int = Field(..., description="正確次数")
    fan_point: np.ndarray = Field(..., description="扇の中心点")


# ---------------------------------------------------------------- local

class LocalDofMap(ArrayModel):
    """局所自由度（辺フラックス）と大域辺の対応"""
    cell: int = Field(..., description="セル番号")
    edges: np.ndarray = Field(..., description="局所順の大域辺番号")
    signs: np.ndarray = Field(..., description="外向き法線と大域法線の向き符号")

    @property
    def n_edges(self) -> int:
        return int(self.edges.shape[0])


class ProjectionPack(ArrayModel):
    """Π̂ と Π⁰ の自由度表現"""
    k: int = Field(..., description="射影次数")
    G: np.ndarray = Field(..., description="∇H_k のグラム行列 (2k, 2k)")
    B: np.ndarray = Field(..., description="射影の右辺行列 (2k, n_E)")
    P: np.ndarray = Field(..., description="G⁻¹B：自由度→係数")
    P0: np.ndarray = Field(..., description="Π⁰φ_j を並べた行列 (2, n_E)")
    member_integrals: np.ndarray = Field(..., description="∫_E p_i dA")


class LocalSystem(ArrayModel):
    """要素ごとの局所系"""
    dof_map: LocalDofMap
    A: np.ndarray = Field(..., description="a_h^E の行列")
    divrow: np.ndarray = Field(..., description="混合項の行 |e_j|（局所外向き）")
    rhs: float = Field(..., description="-∫_E f dA")
    area: float = Field(..., gt=0.0, description="面積 |E|")
    pack: ProjectionPack


class HourglassVector(ArrayModel):
    """砂時計モード ξ の自由度"""
    dofs: np.ndarray = Field(..., description="(-1)^j / |e_j|")


class HarmonicQuadratic(BaseModel):
    """辺中点で (-1)^j をとる調和2次多項式 p* = Re q"""
    model_config = ConfigDict(frozen=True)

    origin: complex = Field(..., description="M_1（複素原点）")
    z1: complex = Field(..., description="M_2 - M_1")
    z2: complex = Field(..., description="M_4 - M_1")
    alpha: complex = Field(..., description="z の係数 2(z1+z2)/(z1 z2)")
    beta: complex = Field(..., description="z² の係数 -2/(z1 z2)")


class CoercivityReport(BaseModel):
    """核上の強圧性スキャン結果"""
    rayleigh_min: float = Field(..., description="発散ゼロ部分空間上の最小レイリー商")
    projection_ratio: float = Field(..., description="‖Π̂ξ‖ / ‖ξ‖_*")
    hourglass_energy: float = Field(..., description="a_h^E(ξ, ξ) = ‖Π̂ξ‖²")
    hourglass_surrogate: float = Field(..., description="‖ξ‖²_* = h_E ‖ξ·n‖²_∂E")
    constants_quotient: float = Field(..., description="定数場でのレイリー商")


# ---------------------------------------------------------------- system

class GlobalNumbering(BaseModel):
    """大域自由度の番号付け"""
    n_edges: int = Field(..., description="フラックス未知数（全辺）")
    n_cells: int = Field(..., description="圧力未知数（全セル）")

    @property
    def total(self) -> int:
        return self.n_edges + self.n_cells


class SaddlePointSystem(ArrayModel):
    """[A Bᵀ; B 0] 型の疎な対称不定値系"""
    matrix: sp.csr_matrix = Field(..., description="自由未知数に対する行列")
    rhs: np.ndarray = Field(..., description="右辺ベクトル")
    numbering: GlobalNumbering
    method: Method
    free_edges: np.ndarray = Field(..., description="未知のまま残る大域辺（昇順）")
    fixed_edges: np.ndarray = Field(..., description="値を固定した大域辺")
    fixed_values: np.ndarray = Field(..., description="固定したフラックス値")
    boundary_edges: np.ndarray = Field(..., description="境界辺")
    cell_areas: np.ndarray = Field(..., description="セル面積")
    floating_pressure: bool = Field(False, description="境界フラックスを全固定し圧力が定数不定")
    projections: Tuple[ProjectionPack, ...] = Field((), description="要素ごとの射影（誤差計算で再利用）")

    @property
    def nnz(self) -> int:
        return int(self.matrix.nnz)

    @property
    def size(self) -> int:
        return int(self.matrix.shape[0])


class SolutionFields(ArrayModel):
    """離散解 (σ_h, u_h)"""
    sigma_dofs: np.ndarray = Field(..., description="辺フラックス（大域法線向き）")
    u_cells: np.ndarray = Field(..., description="セル定数 u_h")
    residual: float = Field(..., description="相対残差 ‖Kx-b‖/‖b‖")
    accurate: bool = Field(True, description="残差が許容値以下か")


# ---------------------------------------------------------------- analysis

class ManufacturedCase(BaseModel):
    """製造解"""
    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    case_id: str = Field(..., description="ケース識別子")
    description: str = Field("", description="説明")
    u: Callable[[np.ndarray, np.ndarray], np.ndarray]
    sigma: Callable[[np.ndarray, np.ndarray], Tuple[np.ndarray, np.ndarray]]
    f: Callable[[np.ndarray, np.ndarray], np.ndarray]
    flux_boundary: Optional[Callable[[np.ndarray, np.ndarray], np.ndarray]] = Field(
        None, description="境界辺中点を受け取り、フラックスを既知とする辺で True を返す"
    )


class ErrorReport(BaseModel):
    """4つの相対誤差"""
    err_u: float = Field(..., ge=0.0)
    err_div: float = Field(..., ge=0.0)
    err_sigma: float = Field(..., ge=0.0)
    err_sigma_n: float = Field(..., ge=0.0)
    h: float = Field(..., description="最大要素直径")
    n_dof: int = Field(..., description="未知数の総数")
    method: Method = "stabfree"
    absolute_errors: List[str] = Field(default_factory=list, description="絶対誤差で報告した項目")

    def value(self, name: str) -> float:
        return float(getattr(self, name))


class ConvergenceTable(BaseModel):
    """収束表"""
    family: str
    method: Method
    case_id: str
    levels: List[int] = Field(..., description="各行のレベルパラメータ")
    rows: List[ErrorReport] = Field(..., description="h の降順")
    rates: Dict[str, Optional[float]] = Field(default_factory=dict, description="末尾3行の最小二乗勾配")

    @model_validator(mode="after")
    def _rows_sorted(self) -> "ConvergenceTable":
        hs = [row.h for row in self.rows]
        if any(b > a for a, b in zip(hs, hs[1:])):
            raise ValueError("rows must be sorted by decreasing h")
        return self


class MethodComparison(BaseModel):
    """D-recipe / 安定化なし の誤差比"""
    family: str
    levels: List[int]
    h: List[float]
    ratios: List[Dict[str, float]] = Field(..., description="レベルごとの err(drecipe)/err(stabfree)")


class DiagnosticsReport(BaseModel):
    """ランダム四角形上の恒等式チェック"""
    count: int
    pairing_min: float
    pairing_max: float
    pairing_direct_max_deviation: float
    orthogonality_max: float
    reproduction_max: float
    continuity_max: float
    coercivity_min: float
    failures: List[str] = Field(default_factory=list)

    @property
    def passed(self) -> bool:
        return not self.failures


# ---------------------------------------------------------------- cli

class RunConfig(BaseModel):
    """CLI実行設定（未知のキーは拒否）"""
    model_config = ConfigDict(extra="forbid")

    command: Literal["mesh", "solve", "convergence", "diagnostics"]
    family: MeshFamily = "cartesian"
    n: int = Field(8, ge=1)
    delta: float = Field(0.2, ge=0.0, lt=0.5)
    amplitude: float = Field(0.1, ge=0.0, le=0.3)
    seeds: int = Field(64, ge=4)
    lloyd_iters: int = Field(20, ge=0)
    nx: int = Field(4, ge=1)
    ny: int = Field(4, ge=1)
    shear: float = Field(0.5, ge=0.0, lt=1.0)
    step: int = Field(0, ge=0)
    alpha: int = Field(2, ge=1)
    method: Method = "stabfree"
    case: str = "bubble"
    levels: Optional[List[int]] = None
    output: Optional[str] = None
    mesh_file: Optional[str] = None
    rng_seed: int = 0
    serial: bool = False
    compare: bool = False
    dump_system: Optional[str] = None
    count: int = Field(100, ge=1)

    @model_validator(mode="after")
    def _check_levels(self) -> "RunConfig":
        if self.command == "convergence":
            if not self.levels or len(self.levels) < 3:
                raise ValueError("convergence には3つ以上のレベルが必要です")
        if self.family == "convex_concave" and self.n % 2:
            raise ValueError("convex_concave は偶数の n が必要です")
        return self
