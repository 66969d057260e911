"""
Módulo de exceções do toolkit de vias aéreas
--------------------------------------------
Hierarquia de erros usada por todos os módulos. Cada classe carrega o código de
saída que a linha de comando deve devolver quando o erro chega até ela.
"""


class AirwayError(Exception):
    """Erro base do toolkit."""

    exit_code = 3


class UsageError(AirwayError):
    """Parâmetros ou flags inválidos fornecidos pelo usuário."""

    exit_code = 1


class DataError(AirwayError):
    """Dados de entrada ilegíveis ou inconsistentes."""

    exit_code = 2


class VolumeFormatError(DataError):
    """Cabeçalho MetaImage malformado, payload truncado ou tipo não suportado."""


class GeometryMismatchError(DataError):
    """Volumes que deveriam compartilhar a mesma grade não compartilham."""


class EmptyMaskError(DataError):
    """A máscara não possui nenhum voxel de frente."""


class NonBinaryMaskError(DataError):
    """A máscara contém valores diferentes de 0 e 1."""


class DisconnectedSkeletonError(DataError):
    """O conjunto de voxels do esqueleto não é 26-conexo."""


class DegenerateLabelError(DataError):
    """Rótulos de treino com uma única classe."""


class TrainingError(DataError):
    """O ajuste numérico do segmentador falhou (covariância singular, amostras inválidas)."""


class ConfigError(DataError):
    """Arquivo de configuração com chave desconhecida ou valor inválido."""


class InvariantViolation(AirwayError):
    """Uma invariante interna ou o contrato de um conector foi violado; indica defeito no código."""

    exit_code = 3


class EmptyMaskWarning(UserWarning):
    """Aviso emitido quando a maior componente de uma máscara vazia é pedida."""
