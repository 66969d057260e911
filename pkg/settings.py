"""
Módulo de configuração do toolkit
---------------------------------
Carrega a configuração de execução a partir do config.json, aplica as
sobreposições de ambiente (.env via python-dotenv) e configura o logging.
"""

import os
import json
import logging
from dataclasses import dataclass, field, asdict
from typing import Dict, List, Any, Optional, Tuple

from dotenv import load_dotenv

from errors import ConfigError, UsageError

LOG_FORMAT = '%(asctime)s - %(name)s - %(levelname)s - %(message)s'
SCHEMA_VERSION = '1.0'

logger = logging.getLogger('settings')


def configure_logging(level: Optional[str] = None) -> None:
    """
    Configura o logging da aplicação.

    Args:
        level: Nível de log (DEBUG, INFO, ...). Se None, usa AIRWAY_LOG_LEVEL ou INFO.
    """
    load_dotenv()
    nivel = (level or os.environ.get('AIRWAY_LOG_LEVEL', 'INFO')).upper()
    if nivel not in ('DEBUG', 'INFO', 'WARNING', 'ERROR', 'CRITICAL'):
        raise ConfigError(f"Nível de log inválido: {nivel}")
    logging.basicConfig(level=getattr(logging, nivel), format=LOG_FORMAT)
    logging.getLogger().setLevel(getattr(logging, nivel))


@dataclass
class SegmenterConfig:
    use_amc: bool = True
    ema_factor: float = 0.5
    max_samples_per_class: int = 60000
    min_island_voxels: int = 10
    background_components: int = 4


@dataclass
class RunConfig:
    """Configuração resolvida de uma execução (padrões <- arquivo <- ambiente <- flags)."""

    seed: Optional[int] = None
    threads: int = 1
    max_iters: int = 5
    select_iter: int = 3
    gamma_mm: float = 5.0
    lambda_gul: float = 0.25
    cutoffs: Tuple[int, int] = (1, 3)
    branch_detect_threshold: float = 0.8
    branch_fraction: float = 0.5
    removal_range: Tuple[float, float] = (0.10, 0.30)
    jitter_vox: int = 8
    patch_size: int = 64
    corpus_size: int = 10
    degrade_fraction: float = 0.3
    refine_mode: str = 'reconnect'
    phantom: Dict[str, Any] = field(default_factory=dict)
    segmenter: SegmenterConfig = field(default_factory=SegmenterConfig)
    cases: List[Dict[str, str]] = field(default_factory=list)
    output_dir: str = 'resultados'

    def validate(self) -> 'RunConfig':
        """Valida faixas dos parâmetros; levanta ConfigError no primeiro problema."""
        if self.threads < 1:
            raise ConfigError(f"threads deve ser >= 1, recebido {self.threads}")
        if self.max_iters < 1:
            raise ConfigError(f"max_iters deve ser >= 1, recebido {self.max_iters}")
        if not 1 <= self.select_iter <= self.max_iters:
            raise ConfigError(f"select_iter deve estar em [1, {self.max_iters}], recebido {self.select_iter}")
        if self.gamma_mm <= 0:
            raise ConfigError("gamma_mm deve ser positivo")
        if self.lambda_gul < 0:
            raise ConfigError("lambda deve ser >= 0")
        g_lm, g_ms = self.cutoffs
        if g_lm < 0 or g_ms < g_lm:
            raise ConfigError(f"cutoffs inválidos: {self.cutoffs}")
        if not 0.0 < self.branch_detect_threshold <= 1.0:
            raise ConfigError("branch_detect_threshold deve estar em (0, 1]")
        if not 0.0 <= self.branch_fraction <= 1.0:
            raise ConfigError("branch_fraction deve estar em [0, 1]")
        lo, hi = self.removal_range
        if not 0.0 < lo <= hi < 1.0:
            raise ConfigError(f"removal_range inválido: {self.removal_range}")
        if self.jitter_vox < 0 or self.patch_size < 4:
            raise ConfigError("jitter_vox ou patch_size inválidos")
        if self.corpus_size < 1:
            raise ConfigError("corpus_size deve ser >= 1")
        if not 0.0 <= self.degrade_fraction < 1.0:
            raise ConfigError("degrade_fraction deve estar em [0, 1)")
        if self.refine_mode not in ('reconnect', 'lcc'):
            raise ConfigError(f"refine_mode deve ser 'reconnect' ou 'lcc', recebido {self.refine_mode}")
        if not 0.0 <= self.segmenter.ema_factor <= 1.0:
            raise ConfigError("segmenter.ema_factor deve estar em [0, 1]")
        if self.segmenter.background_components < 1:
            raise ConfigError("segmenter.background_components deve ser >= 1")
        return self

    def to_dict(self) -> Dict[str, Any]:
        """Converte a configuração para um dicionário serializável."""
        dados = asdict(self)
        dados['cutoffs'] = list(self.cutoffs)
        dados['removal_range'] = list(self.removal_range)
        dados['lambda'] = dados.pop('lambda_gul')
        return dados


# Chaves do arquivo JSON que têm nome diferente no dataclass
_ALIASES = {'lambda': 'lambda_gul'}


def _apply(config: RunConfig, valores: Dict[str, Any], origem: str) -> None:
    campos = {f for f in RunConfig.__dataclass_fields__}
    for chave, valor in valores.items():
        nome = _ALIASES.get(chave, chave)
        if nome not in campos:
            raise ConfigError(f"Chave desconhecida '{chave}' em {origem}")
        if nome == 'segmenter':
            if not isinstance(valor, dict):
                raise ConfigError(f"'segmenter' deve ser um objeto em {origem}")
            for sub_chave, sub_valor in valor.items():
                if sub_chave not in SegmenterConfig.__dataclass_fields__:
                    raise ConfigError(f"Chave desconhecida 'segmenter.{sub_chave}' em {origem}")
                setattr(config.segmenter, sub_chave, sub_valor)
            continue
        if nome in ('cutoffs', 'removal_range'):
            if not isinstance(valor, (list, tuple)) or len(valor) != 2:
                raise ConfigError(f"'{chave}' deve ser um par em {origem}")
            valor = tuple(valor)
        setattr(config, nome, valor)


def load_run_config(path: Optional[str] = None, overrides: Optional[Dict[str, Any]] = None) -> RunConfig:
    """
    Resolve a configuração de execução.

    Args:
        path: Caminho do arquivo JSON de configuração. Se None, só padrões e ambiente.
        overrides: Valores vindos das flags da linha de comando (None é ignorado).

    Returns:
        RunConfig validado.

    Raises:
        ConfigError: arquivo ou ambiente inválidos.
        UsageError: valores inválidos vindos das flags.
    """
    load_dotenv()
    config = RunConfig()

    if path is not None:
        if not os.path.exists(path):
            raise ConfigError(f"Arquivo de configuração não encontrado: {path}")
        try:
            with open(path, 'r') as f:
                valores = json.load(f)
        except json.JSONDecodeError as e:
            raise ConfigError(f"Configuração malformada em {path}: {str(e)}")
        if not isinstance(valores, dict):
            raise ConfigError(f"A configuração em {path} deve ser um objeto JSON")
        _apply(config, valores, path)
        logger.info(f"Configuração carregada de {path}")

    # Configurações específicas do ambiente
    ambiente = {}
    if 'AIRWAY_THREADS' in os.environ:
        try:
            ambiente['threads'] = int(os.environ['AIRWAY_THREADS'])
        except ValueError:
            raise ConfigError(f"AIRWAY_THREADS inválido: {os.environ['AIRWAY_THREADS']}")
    if 'AIRWAY_OUTPUT_DIR' in os.environ:
        ambiente['output_dir'] = os.environ['AIRWAY_OUTPUT_DIR']
    _apply(config, ambiente, 'ambiente')

    config.validate()
    if overrides:
        try:
            _apply(config, {k: v for k, v in overrides.items() if v is not None}, 'flags')
            config.validate()
        except ConfigError as e:
            raise UsageError(f"Flag inválida: {str(e)}")
    return config
