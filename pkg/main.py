import argparse
import json
import logging
import sys
from pathlib import Path
from typing import List, Optional

from pydantic import ValidationError

from src.core.config import settings
from src.core.exceptions import MixedVemException, UsageException, ValidationException
from src.models.data_models import (
    ERROR_NAMES,
    ConvergenceTable,
    DiagnosticsReport,
    ErrorReport,
    MethodComparison,
    PolygonalMesh,
    RegularityReport,
    RunConfig,
)
from src.services.convergence_engine import ConvergenceEngine
from src.services.diagnostics_service import DiagnosticsService
from src.services.error_analysis import ErrorAnalyzer
from src.services.local_operator import LocalOperatorService
from src.services.manufactured_cases import available_cases
from src.services.mesh_generator import MeshGenerator
from src.services.mesh_service import MeshService
from src.services.saddle_point_solver import SaddlePointSolver

logging.basicConfig(
    level=getattr(logging, settings.log_level, logging.WARNING),
    format='%(asctime)s - %(name)s - %(levelname)s - %(message)s'
)
logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_NUMERICAL = 2

# CLI フラグ名 → RunConfig フィールド名
_FLAG_FIELDS = {
    "family": "family", "n": "n", "delta": "delta", "amplitude": "amplitude",
    "seeds": "seeds", "lloyd": "lloyd_iters", "seed": "rng_seed", "nx": "nx", "ny": "ny",
    "shear": "shear", "step": "step", "alpha": "alpha", "method": "method", "case": "case",
    "levels": "levels", "output": "output", "mesh": "mesh_file", "serial": "serial",
    "compare": "compare", "dump_system": "dump_system", "count": "count",
}


class UsageArgumentParser(argparse.ArgumentParser):
    """引数エラーで終了せず UsageException を送出するパーサー"""

    def error(self, message: str):
        raise UsageException(message)


def build_parser() -> UsageArgumentParser:
    common = UsageArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON設定ファイル（フラグが優先）")
    common.add_argument("--family", choices=["cartesian", "convex_concave", "distorted", "random", "rhomboidal"])
    common.add_argument("--n", type=int, help="格子分割数")
    common.add_argument("--delta", type=float, help="convex_concave の変位パラメータ")
    common.add_argument("--amplitude", type=float, help="distorted の振幅")
    common.add_argument("--seeds", type=int, help="random の種点数")
    common.add_argument("--lloyd", type=int, help="ロイド反復回数")
    common.add_argument("--seed", type=int, help="乱数シード")
    common.add_argument("--nx", type=int, help="rhomboidal の基本 x 分割数")
    common.add_argument("--ny", type=int, help="rhomboidal の基本 y 分割数")
    common.add_argument("--shear", type=float, help="rhomboidal のずらし量")
    common.add_argument("--step", type=int, help="異方細分のステップ")
    common.add_argument("--alpha", type=int, help="異方細分の倍率")
    common.add_argument("--method", choices=["stabfree", "drecipe"])
    common.add_argument("--case", help=f"製造解（{', '.join(available_cases())}）")
    common.add_argument("--levels", type=int, nargs="+", help="収束スタディのレベル")
    common.add_argument("--output", help="出力ファイル（拡張子なしのステムも可）")
    common.add_argument("--mesh", help="入力メッシュJSON")
    common.add_argument("--serial", action="store_const", const=True, help="要素計算を逐次実行")
    common.add_argument("--compare", action="store_const", const=True, help="2手法を比較")
    common.add_argument("--dump-system", dest="dump_system", help="Matrix Market 形式で行列を出力")
    common.add_argument("--count", type=int, help="診断に使うランダム四角形の数")

    parser = UsageArgumentParser(prog="mixvem", description="安定化なし混合仮想要素法")
    subparsers = parser.add_subparsers(dest="command", required=True, parser_class=UsageArgumentParser)
    subparsers.add_parser("mesh", parents=[common], help="メッシュを生成してJSONに書き出す")
    subparsers.add_parser("solve", parents=[common], help="1回求解して誤差を表示")
    subparsers.add_parser("convergence", parents=[common], help="収束スタディ")
    subparsers.add_parser("diagnostics", parents=[common], help="ランダム四角形で恒等式を検査")
    return parser


def load_run_config(argv: Optional[List[str]] = None) -> RunConfig:
    """設定ファイルとフラグから RunConfig を構築（フラグが優先）"""
    args = build_parser().parse_args(argv)
    values = {}
    if args.config:
        try:
            with open(args.config, "r", encoding="utf-8") as file:
                values.update(json.load(file))
        except (OSError, json.JSONDecodeError) as e:
            raise UsageException(f"設定ファイルを読み込めません: {str(e)}")
    for flag, field in _FLAG_FIELDS.items():
        value = getattr(args, flag)
        if value is not None:
            values[field] = value
    values["command"] = args.command
    try:
        return RunConfig(**values)
    except ValidationError as e:
        raise UsageException(f"設定が不正です: {str(e)}")


class MixedVemApp:
    """混合仮想要素法の実行アプリケーション"""

    def __init__(self, serial: bool = False):
        self.mesh_service = MeshService()
        self.mesh_generator = MeshGenerator(self.mesh_service)
        self.local_operator = LocalOperatorService(self.mesh_service)
        self.solver = SaddlePointSolver(self.local_operator, serial=serial or settings.serial)
        self.analyzer = ErrorAnalyzer(self.local_operator)
        self.engine = ConvergenceEngine(self.mesh_generator, self.solver, self.analyzer)
        self.diagnostics = DiagnosticsService(self.mesh_generator, self.local_operator)

    @staticmethod
    def _level(config: RunConfig) -> int:
        if config.family == "random":
            return config.seeds
        if config.family == "rhomboidal":
            return config.step
        return config.n

    @staticmethod
    def _mesh_params(config: RunConfig) -> dict:
        return {
            "delta": config.delta, "amplitude": config.amplitude, "lloyd_iters": config.lloyd_iters,
            "rng_seed": config.rng_seed, "nx": config.nx, "ny": config.ny,
            "shear": config.shear, "alpha": config.alpha,
        }

    def _output(self, config: RunConfig, default_name: str) -> Path:
        if config.output:
            return Path(config.output)
        return Path(settings.output_dir) / default_name

    def load_or_generate_mesh(self, config: RunConfig) -> PolygonalMesh:
        if config.mesh_file:
            return self.mesh_service.load_mesh(config.mesh_file)
        return self.engine.build_mesh(config.family, self._level(config), **self._mesh_params(config))

    def cmd_mesh(self, config: RunConfig) -> Path:
        """メッシュを生成して書き出し、正則性を表示"""
        mesh = self.load_or_generate_mesh(config)
        path = self.mesh_service.save_mesh(mesh, str(self._output(config, f"mesh_{config.family}.json")))
        self.display_mesh(mesh, self.mesh_service.check_regularity(mesh), path)
        return path

    def cmd_solve(self, config: RunConfig) -> ErrorReport:
        """1つのメッシュで求解し誤差を表示"""
        mesh = self.load_or_generate_mesh(config)
        case = self.engine.case_for(config.family, config.case, config.shear)
        system, solution = self.engine.solve_case(mesh, config.method, case)
        if config.dump_system:
            self.solver.dump_matrix_market(system, config.dump_system)
        report = self.analyzer.error_report(mesh, system, solution, case, config.method)
        path = self.engine.write_report_csv(report, str(self._output(config, f"solve_{config.family}_{config.method}.csv")))
        self.display_report(report, solution.residual, path)
        return report

    def cmd_convergence(self, config: RunConfig) -> List[ConvergenceTable]:
        """収束スタディ（--compare で2手法と誤差比）"""
        methods = ["stabfree", "drecipe"] if config.compare else [config.method]
        output = self._output(config, f"convergence_{config.family}")
        stem = output.with_suffix("") if output.suffix == ".csv" else output

        tables = []
        for method in methods:
            table = self.engine.convergence_study(
                config.family, config.levels, method, config.case, **self._mesh_params(config)
            )
            method_stem = Path(f"{stem}_{method}") if config.compare else stem
            csv_path = self.engine.write_table_csv(table, f"{method_stem}.csv")
            self.engine.write_plot_data(table, str(method_stem))
            self.display_table(table, csv_path)
            tables.append(table)

        if config.compare:
            comparison = self.engine.compare_methods(tables[0], tables[1])
            path = self.engine.write_comparison_csv(comparison, f"{stem}_ratios.csv")
            self.display_comparison(comparison, path)
        return tables

    def cmd_diagnostics(self, config: RunConfig) -> DiagnosticsReport:
        """ランダム四角形で恒等式を検査（違反があれば例外）"""
        report = self.diagnostics.run(config.count, config.rng_seed)
        self.display_diagnostics(report)
        return self.diagnostics.require(report)

    def run(self, config: RunConfig):
        commands = {
            "mesh": self.cmd_mesh,
            "solve": self.cmd_solve,
            "convergence": self.cmd_convergence,
            "diagnostics": self.cmd_diagnostics,
        }
        return commands[config.command](config)

    def display_mesh(self, mesh: PolygonalMesh, regularity: RegularityReport, path: Path):
        print("\n" + "=" * 50)
        print("🔷 メッシュ")
        print("=" * 50)
        print(f"セル数: {mesh.n_cells}  辺数: {mesh.n_edges}  頂点数: {mesh.n_vertices}")
        print(f"最大直径 h: {mesh.h:.6e}")
        print(f"gamma_edge: {regularity.gamma_edge:.6f} (セル {regularity.worst_cell})")
        print(f"gamma_star: {regularity.gamma_star:.6f}")
        print(f"非凸セル数: {regularity.n_nonconvex}")
        print(f"\n💾 出力: {path}")

    def display_report(self, report: ErrorReport, residual: float, path: Path):
        print("\n" + "=" * 50)
        print(f"📐 求解結果 ({report.method})")
        print("=" * 50)
        print(f"h = {report.h:.6e}   未知数 = {report.n_dof}   相対残差 = {residual:.3e}")
        for name in ERROR_NAMES:
            flag = "（絶対誤差）" if name in report.absolute_errors else ""
            print(f"   {name:<12} {report.value(name):.6e} {flag}")
        print(f"\n💾 出力: {path}")

    def display_table(self, table: ConvergenceTable, path: Path):
        print("\n" + "=" * 72)
        print(f"📈 収束スタディ: {table.family} / {table.method} / {table.case_id}")
        print("=" * 72)
        print(f"{'h':>12} {'ndof':>8} " + " ".join(f"{name:>12}" for name in ERROR_NAMES))
        for row in table.rows:
            print(f"{row.h:>12.4e} {row.n_dof:>8} " + " ".join(f"{row.value(n):>12.4e}" for n in ERROR_NAMES))
        rates = " ".join(
            f"{'-':>12}" if table.rates.get(n) is None else f"{table.rates[n]:>12.3f}" for n in ERROR_NAMES
        )
        print(f"{'rates':>12} {'':>8} {rates}")
        print(f"\n💾 出力: {path}")

    def display_comparison(self, comparison: MethodComparison, path: Path):
        print("\n" + "-" * 72)
        print("⚖️  誤差比 err(drecipe) / err(stabfree)")
        for level, ratio in zip(comparison.levels, comparison.ratios):
            print(f"   レベル {level:>6}: " + " ".join(f"{n}={ratio[n]:.4f}" for n in ERROR_NAMES))
        print(f"\n💾 出力: {path}")

    def display_diagnostics(self, report: DiagnosticsReport):
        print("\n" + "=" * 50)
        print(f"🔍 診断（ランダム四角形 {report.count} 個）")
        print("=" * 50)
        print(f"(ξ, ∇p*) 範囲:         [{report.pairing_min:.15f}, {report.pairing_max:.15f}]")
        print(f"射影経由と直接の差:    {report.pairing_direct_max_deviation:.3e}")
        print(f"(ξ, a) 最大値:         {report.orthogonality_max:.3e}")
        print(f"定数場の再現誤差:      {report.reproduction_max:.3e}")
        print(f"連続性の相対差:        {report.continuity_max:.3e}")
        print(f"核上の強圧性 最小値:   {report.coercivity_min:.6f}")
        if report.failures:
            print("\n⚠️  違反:")
            for failure in report.failures:
                print(f"   {failure}")
        else:
            print("\n✅ すべての恒等式が許容値内です")


def main(argv: Optional[List[str]] = None) -> int:
    """メイン関数（終了コード 0: 成功, 1: 使い方の誤り, 2: 数値的失敗）"""
    try:
        config = load_run_config(argv)
        app = MixedVemApp(serial=config.serial)
        app.run(config)
        return EXIT_OK
    except (UsageException, ValidationException) as e:
        logger.error(f"引数エラー: {str(e)}")
        print(f"\n❌ 引数エラー: {str(e)}", file=sys.stderr)
        return EXIT_USAGE
    except MixedVemException as e:
        logger.error(f"数値計算エラー: {str(e)}")
        print(f"\n❌ エラー: {str(e)}", file=sys.stderr)
        return EXIT_NUMERICAL
    except Exception as e:
        logger.error(f"予期しないエラー: {str(e)}")
        print(f"\n❌ 予期しないエラーが発生しました: {str(e)}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
