"""カスタム例外クラス"""
from typing import Optional


class MixedVemException(Exception):
    """mixvemアプリケーションのベース例外"""
    pass


class ConfigurationException(MixedVemException):
    """設定関連の例外"""
    pass


class ValidationException(MixedVemException):
    """入力バリデーション関連の例外"""
    pass


class UsageException(MixedVemException):
    """コマンドライン引数の誤り"""
    pass


class MeshException(MixedVemException):
    """メッシュ関連の例外"""
    pass


class TopologyException(MeshException):
    """セルの頂点ループや辺の共有関係が不正"""
    pass


class DegenerateCellException(MeshException):
    """面積ゼロなど退化したセル"""
    def __init__(self, message: str, cell: Optional[int] = None):
        super().__init__(message)
        self.cell = cell


class MeshGenerationException(MeshException):
    """メッシュ生成の失敗（自己交差・反転セル等）"""
    pass


class MeshSizeException(MeshException):
    """セル数が上限を超える"""
    pass


class QuadratureException(MixedVemException):
    """求積則を構成できない"""
    pass


class GeometryException(MixedVemException):
    """幾何的構成（p*等）が退化している"""
    pass


class DegenerateElementException(MixedVemException):
    """局所射影のグラム行列が数値的に特異"""
    def __init__(self, message: str, cell: Optional[int] = None, condition: Optional[float] = None):
        super().__init__(message)
        self.cell = cell
        self.condition = condition


class ElementAssemblyException(MixedVemException):
    """要素行列の計算・組み立て失敗"""
    def __init__(self, message: str, cell: Optional[int] = None):
        super().__init__(message)
        self.cell = cell


class SolverException(MixedVemException):
    """線形ソルバーの失敗"""
    def __init__(self, message: str, diagnostics: Optional[dict] = None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


class StudyException(MixedVemException):
    """収束スタディの特定レベルでの失敗"""
    def __init__(self, message: str, level: Optional[int] = None):
        super().__init__(message)
        self.level = level


class ComparisonException(MixedVemException):
    """手法比較の入力不整合"""
    pass


class DiagnosticsException(MixedVemException):
    """診断チェックで恒等式が許容値を超えて破れた"""
    def __init__(self, message: str, failures: Optional[list] = None):
        super().__init__(message)
        self.failures = failures or []


class AccuracyWarning(UserWarning):
    """ソルバー残差が許容値を超えた"""
    pass
