import csv
import logging
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from ..core.exceptions import ComparisonException, MixedVemException, StudyException, ValidationException
from ..models.data_models import (
    ERROR_NAMES,
    ConvergenceTable,
    ErrorReport,
    ManufacturedCase,
    MeshFamily,
    Method,
    MethodComparison,
    PolygonalMesh,
    SaddlePointSystem,
    SolutionFields,
)
from .error_analysis import ErrorAnalyzer
from .manufactured_cases import get_case
from .mesh_generator import MeshGenerator
from .saddle_point_solver import SaddlePointSolver

logger = logging.getLogger(__name__)

# 収束率の推定に使う末尾の行数
RATE_WINDOW = 3

DEFAULT_SHEAR = 0.5


def estimate_rate(h: Sequence[float], errors: Sequence[float]) -> Optional[float]:
    """log(err) と log(h) の最小二乗勾配"""
    h = np.asarray(h, dtype=float)
    errors = np.asarray(errors, dtype=float)
    mask = (errors > 0.0) & np.isfinite(errors) & (h > 0.0)
    if mask.sum() < 2:
        return None
    slope, _ = np.polyfit(np.log(h[mask]), np.log(errors[mask]), 1)
    return float(slope)


def _format(value: Optional[float]) -> str:
    return "" if value is None else repr(float(value))


class ConvergenceEngine:
    """メッシュ生成→組み立て→求解→誤差評価のパイプラインと収束スタディ"""

    def __init__(
        self,
        mesh_generator: Optional[MeshGenerator] = None,
        solver: Optional[SaddlePointSolver] = None,
        analyzer: Optional[ErrorAnalyzer] = None
    ):
        self.mesh_generator = mesh_generator or MeshGenerator()
        self.solver = solver or SaddlePointSolver()
        self.analyzer = analyzer or ErrorAnalyzer(self.solver.local_operator)

    def build_mesh(
        self,
        family: MeshFamily,
        level: int,
        *,
        delta: float = 0.2,
        amplitude: float = 0.1,
        lloyd_iters: int = 20,
        rng_seed: int = 0,
        nx: int = 4,
        ny: int = 4,
        shear: float = DEFAULT_SHEAR,
        alpha: int = 2
    ) -> PolygonalMesh:
        """レベルパラメータ（n, 種点数, 細分ステップ）からメッシュを生成"""
        if family == "cartesian":
            return self.mesh_generator.generate_cartesian(level)
        if family == "convex_concave":
            return self.mesh_generator.generate_convex_concave(level, delta)
        if family == "distorted":
            return self.mesh_generator.generate_distorted(level, amplitude)
        if family == "random":
            return self.mesh_generator.generate_random_voronoi(level, lloyd_iters, rng_seed)
        if family == "rhomboidal":
            return self.mesh_generator.refine_anisotropic(nx, ny, level, alpha, shear)
        raise ValidationException(f"未知のメッシュ族です: {family}")

    @staticmethod
    def case_for(family: MeshFamily, case_id: str, shear: float = DEFAULT_SHEAR) -> ManufacturedCase:
        """メッシュ族の領域に合わせた製造解（rhomboidal はせん断した平行四辺形領域）"""
        return get_case(case_id, shear if family == "rhomboidal" else 0.0)

    def solve_case(
        self,
        mesh: PolygonalMesh,
        method: Method,
        case: ManufacturedCase
    ) -> Tuple[SaddlePointSystem, SolutionFields]:
        """組み立てと求解（ケースが指定する境界フラックスは既知として消去）"""
        system = self.solver.assemble(mesh, method, case.f)
        if case.flux_boundary is not None:
            boundary = mesh.boundary_edges
            midpoints = 0.5 * (mesh.vertices[mesh.edges[boundary, 0]] + mesh.vertices[mesh.edges[boundary, 1]])
            selected = boundary[np.asarray(case.flux_boundary(midpoints[:, 0], midpoints[:, 1]), dtype=bool)]
            fluxes = self.solver.interpolate_fluxes(mesh, case.sigma)
            system = self.solver.apply_known_fluxes(system, {int(e): fluxes[e] for e in selected})
        return system, self.solver.solve(system)

    def run_level(self, mesh: PolygonalMesh, method: Method, case: ManufacturedCase) -> ErrorReport:
        system, solution = self.solve_case(mesh, method, case)
        return self.analyzer.error_report(mesh, system, solution, case, method)

    def convergence_study(
        self,
        family: MeshFamily,
        levels: Sequence[int],
        method: Method,
        case_id: str = "bubble",
        **mesh_params
    ) -> ConvergenceTable:
        """各レベルで誤差を計算し、末尾3行から収束率を推定"""
        if len(levels) < RATE_WINDOW:
            raise ValidationException(f"収束スタディには{RATE_WINDOW}つ以上のレベルが必要です")
        case = self.case_for(family, case_id, mesh_params.get("shear", DEFAULT_SHEAR))

        results: List[Tuple[int, ErrorReport]] = []
        for level in levels:
            try:
                mesh = self.build_mesh(family, level, **mesh_params)
                report = self.run_level(mesh, method, case)
            except MixedVemException as e:
                logger.error(f"レベル {level} で失敗しました: {str(e)}")
                raise StudyException(f"レベル {level} で失敗しました: {str(e)}", level=level)
            logger.info(f"{family}/{method} レベル {level}: h={report.h:.4e}")
            results.append((level, report))

        results.sort(key=lambda item: -item[1].h)
        rows = [report for _, report in results]
        tail = rows[-RATE_WINDOW:]
        rates = {
            name: estimate_rate([r.h for r in tail], [r.value(name) for r in tail])
            for name in ERROR_NAMES
        }
        return ConvergenceTable(
            family=family,
            method=method,
            case_id=case_id,
            levels=[level for level, _ in results],
            rows=rows,
            rates=rates,
        )

    @staticmethod
    def compare_methods(table_stabfree: ConvergenceTable, table_drecipe: ConvergenceTable) -> MethodComparison:
        """レベルごとの err(drecipe)/err(stabfree)"""
        if table_stabfree.levels != table_drecipe.levels or table_stabfree.family != table_drecipe.family:
            raise ComparisonException("比較する2つの表のメッシュ族またはレベルが一致しません")

        ratios: List[Dict[str, float]] = []
        for row_s, row_d in zip(table_stabfree.rows, table_drecipe.rows):
            ratio = {}
            for name in ERROR_NAMES:
                base, other = row_s.value(name), row_d.value(name)
                if base == 0.0:
                    ratio[name] = 1.0 if other == 0.0 else float("inf")
                else:
                    ratio[name] = other / base
            ratios.append(ratio)

        return MethodComparison(
            family=table_stabfree.family,
            levels=list(table_stabfree.levels),
            h=[row.h for row in table_stabfree.rows],
            ratios=ratios,
        )

    @staticmethod
    def write_table_csv(table: ConvergenceTable, path: str) -> Path:
        """h,ndof,誤差4種 の行と rates 行を書き出す"""
        file_path = Path(path)
        file_path.parent.mkdir(parents=True, exist_ok=True)
        with open(file_path, "w", encoding="utf-8", newline="") as file:
            writer = csv.writer(file, lineterminator="\n")
            writer.writerow(["h", "ndof", *ERROR_NAMES])
            for row in table.rows:
                writer.writerow([_format(row.h), row.n_dof, *(_format(row.value(name)) for name in ERROR_NAMES)])
            writer.writerow(["rates", "", *(_format(table.rates.get(name)) for name in ERROR_NAMES)])
        logger.info(f"収束表を書き出しました: {file_path}")
        return file_path

    @staticmethod
    def write_report_csv(report: ErrorReport, path: str) -> Path:
        """単一求解の誤差を1行で書き出す"""
        file_path = Path(path)
        file_path.parent.mkdir(parents=True, exist_ok=True)
        with open(file_path, "w", encoding="utf-8", newline="") as file:
            writer = csv.writer(file, lineterminator="\n")
            writer.writerow(["h", "ndof", *ERROR_NAMES])
            writer.writerow([_format(report.h), report.n_dof, *(_format(report.value(name)) for name in ERROR_NAMES)])
        return file_path

    @staticmethod
    def write_plot_data(table: ConvergenceTable, stem: str) -> List[Path]:
        """誤差ごとに `h err` の2列データを書き出す"""
        paths = []
        for name in ERROR_NAMES:
            file_path = Path(f"{stem}_{name}.dat")
            file_path.parent.mkdir(parents=True, exist_ok=True)
            with open(file_path, "w", encoding="utf-8") as file:
                for row in table.rows:
                    file.write(f"{_format(row.h)} {_format(row.value(name))}\n")
            paths.append(file_path)
        return paths

    @staticmethod
    def write_comparison_csv(comparison: MethodComparison, path: str) -> Path:
        file_path = Path(path)
        file_path.parent.mkdir(parents=True, exist_ok=True)
        with open(file_path, "w", encoding="utf-8", newline="") as file:
            writer = csv.writer(file, lineterminator="\n")
            writer.writerow(["level", "h", *ERROR_NAMES])
            for level, h, ratio in zip(comparison.levels, comparison.h, comparison.ratios):
                writer.writerow([level, _format(h), *(_format(ratio[name]) for name in ERROR_NAMES)])
        logger.info(f"手法比較を書き出しました: {file_path}")
        return file_path
