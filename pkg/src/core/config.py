import os
from pydantic import BaseModel, ConfigDict, Field, ValidationError
from dotenv import load_dotenv

load_dotenv()


class Settings(BaseModel):
    """アプリケーション設定"""
    model_config = ConfigDict(extra="forbid", frozen=True)

    log_level: str = Field("WARNING", description="ログレベル")

    # 並列処理設定
    max_workers: int = Field(4, ge=1, description="要素行列計算の最大スレッド数")
    serial: bool = Field(False, description="Trueなら要素計算を逐次実行する")

    # 数値積分設定
    quadrature_exactness: int = Field(6, ge=1, description="多角形求積の多項式正確次数")
    error_edge_points: int = Field(4, ge=1, description="誤差計算に用いる辺ガウス点数")

    # ソルバー設定
    solver_tolerance: float = Field(1e-10, gt=0.0, description="相対残差の許容値")
    gram_condition_limit: float = Field(1e12, gt=1.0, description="グラム行列の条件数上限")
    norm_floor: float = Field(1e-14, gt=0.0, description="これ未満の正規化ノルムは絶対誤差に切り替える")

    # メッシュ設定
    max_cells: int = Field(4_000_000, ge=1, description="生成可能な最大セル数")
    voronoi_retries: int = Field(5, ge=1, description="ボロノイ生成の最大試行回数")

    # 出力設定
    output_dir: str = Field("results", description="出力ディレクトリ")


def _env_bool(name: str, default: str) -> bool:
    return os.getenv(name, default).strip().lower() in ("1", "true", "yes", "on")


def get_settings() -> Settings:
    """設定を取得する"""
    from .exceptions import ConfigurationException

    try:
        return Settings(
            log_level=os.getenv("MIXVEM_LOG_LEVEL", "WARNING").upper(),
            max_workers=int(os.getenv("MIXVEM_MAX_WORKERS", "4")),
            serial=_env_bool("MIXVEM_SERIAL", "false"),
            quadrature_exactness=int(os.getenv("MIXVEM_QUADRATURE_EXACTNESS", "6")),
            error_edge_points=int(os.getenv("MIXVEM_ERROR_EDGE_POINTS", "4")),
            solver_tolerance=float(os.getenv("MIXVEM_SOLVER_TOLERANCE", "1e-10")),
            gram_condition_limit=float(os.getenv("MIXVEM_GRAM_CONDITION_LIMIT", "1e12")),
            norm_floor=float(os.getenv("MIXVEM_NORM_FLOOR", "1e-14")),
            max_cells=int(os.getenv("MIXVEM_MAX_CELLS", "4000000")),
            voronoi_retries=int(os.getenv("MIXVEM_VORONOI_RETRIES", "5")),
            output_dir=os.getenv("MIXVEM_OUTPUT_DIR", "results"),
        )
    except (ValueError, ValidationError) as e:
        raise ConfigurationException(f"環境変数の設定値が不正です: {str(e)}")


# グローバル設定インスタンス
settings = get_settings()
