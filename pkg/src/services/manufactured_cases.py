import logging
from typing import Callable, Dict, List

import numpy as np

from ..core.exceptions import ValidationException
from ..models.data_models import ManufacturedCase

logger = logging.getLogger(__name__)

# 境界判定の許容値
_SIDE_TOL = 1e-12


def _bubble_case(shear: float = 0.0) -> ManufacturedCase:
    # ξ = (1+shear)x − shear·y は rhomboidal の平行四辺形領域を ξ ∈ [0,1] に戻す
    w = 1.0 + shear

    def xi(x, y):
        return w * x - shear * y

    def u(x, y):
        s = xi(x, y)
        return s * (1 - s) * y * (1 - y)

    def sigma(x, y):
        s = xi(x, y)
        du_ds = (1 - 2 * s) * y * (1 - y)
        du_dy = s * (1 - s) * (1 - 2 * y)
        return w * du_ds, -shear * du_ds + du_dy

    def f(x, y):
        s = xi(x, y)
        return 2 * (w * w + shear * shear) * y * (1 - y) + 2 * shear * (1 - 2 * s) * (1 - 2 * y) + 2 * s * (1 - s)

    return ManufacturedCase(
        case_id="bubble",
        description=f"u = ξ(1-ξ)y(1-y), ξ = (1+shear)x - shear·y (shear={shear}), 斉次自然境界条件",
        u=u,
        sigma=sigma,
        f=f,
    )


def _zero_case(shear: float = 0.0) -> ManufacturedCase:
    # zero と linear は領域の形に依存しない
    return ManufacturedCase(
        case_id="zero",
        description="f ≡ 0（解はゼロ）",
        u=lambda x, y: np.zeros_like(x),
        sigma=lambda x, y: (np.zeros_like(x), np.zeros_like(x)),
        f=lambda x, y: np.zeros_like(x),
    )


def _linear_case(shear: float = 0.0) -> ManufacturedCase:
    # 全境界フラックスを固定するため u は平均ゼロに正規化
    return ManufacturedCase(
        case_id="linear",
        description="σ = (1, 0) のパッチテスト（全境界フラックス固定）",
        u=lambda x, y: x - 0.5,
        sigma=lambda x, y: (np.ones_like(x), np.zeros_like(x)),
        f=lambda x, y: np.zeros_like(x),
        flux_boundary=lambda x, y: np.ones_like(x, dtype=bool),
    )


def _unit_load_case(shear: float = 0.0) -> ManufacturedCase:
    if shear != 0.0:
        raise ValidationException(f"unit_load は単位正方形領域でのみ定義されます（shear={shear}）")
    return ManufacturedCase(
        case_id="unit_load",
        description="f ≡ 1 のチャネル流れ（上下辺は σ·n = 0 を固定）",
        u=lambda x, y: 0.5 * x * (1 - x),
        sigma=lambda x, y: (0.5 - x, np.zeros_like(x)),
        f=lambda x, y: np.ones_like(x),
        flux_boundary=lambda x, y: (y < _SIDE_TOL) | (y > 1.0 - _SIDE_TOL),
    )


CASES: Dict[str, Callable[[float], ManufacturedCase]] = {
    "bubble": _bubble_case,
    "zero": _zero_case,
    "linear": _linear_case,
    "unit_load": _unit_load_case,
}


def available_cases() -> List[str]:
    return sorted(CASES)


def get_case(case_id: str, shear: float = 0.0) -> ManufacturedCase:
    """製造解を識別子から取得（shear は rhomboidal の平行四辺形領域に合わせる）"""
    factory = CASES.get(case_id)
    if factory is None:
        raise ValidationException(f"未知の製造解です: {case_id}（候補: {', '.join(available_cases())}）")
    return factory(shear)


def divergence_residual(case: ManufacturedCase, x: np.ndarray, y: np.ndarray, step: float = 1e-30) -> np.ndarray:
    """複素ステップ微分で求めた |−div σ − f|"""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    dsx = np.imag(case.sigma(x + 1j * step, y.astype(complex))[0]) / step
    dsy = np.imag(case.sigma(x.astype(complex), y + 1j * step)[1]) / step
    return np.abs(-(dsx + dsy) - case.f(x, y))
