"""
Módulo de métricas de vias aéreas
---------------------------------
Ramos detectados (BD), comprimento de árvore detectado (TLD), precisão, Dice,
sensibilidade e especificidade, com detalhe por ramo e agregação de corpus
(média e desvio padrão amostral) via pandas.
"""

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, asdict
from typing import Dict, List, Any, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from errors import EmptyMaskError, UsageError, GeometryMismatchError
from volume_core import Volume, as_mask, require_same_geometry, atomic_path, write_json
from skeleton import SkeletonTree, skeletonize, skeleton_length_inside

logger = logging.getLogger('metrics')

# Cabeçalho fixo do CSV de corpus
CSV_COLUMNS = [
    'case_id', 'bd_pct', 'tld_pct', 'precision_pct', 'dsc_pct', 'sensitivity_pct',
    'specificity_pct', 'n_branches_ref', 'n_branches_detected', 'total_length_mm',
    'detected_length_mm',
]
PCT_METRICS = ['bd_pct', 'tld_pct', 'precision_pct', 'dsc_pct', 'sensitivity_pct', 'specificity_pct']


@dataclass
class BranchDetection:
    branch_id: int
    generation: int
    covered_fraction: float
    covered_length_mm: float
    detected: bool


@dataclass
class EvalReport:
    """Relatório de avaliação de um caso; métricas indefinidas ficam como None."""

    bd_pct: Optional[float]
    tld_pct: Optional[float]
    precision_pct: Optional[float]
    dsc_pct: Optional[float]
    sensitivity_pct: Optional[float]
    specificity_pct: Optional[float]
    n_branches_ref: int
    n_branches_detected: int
    total_length_mm: float
    detected_length_mm: float
    branch_detect_threshold: float
    per_branch: List[BranchDetection] = field(default_factory=list)
    case_id: str = ''

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    def row(self) -> Dict[str, Any]:
        """Linha do CSV de corpus."""
        dados = self.to_dict()
        return {coluna: dados[coluna] for coluna in CSV_COLUMNS}

    def save(self, path: str) -> None:
        write_json(path, self.to_dict())


def _pct(numerador: float, denominador: float) -> Optional[float]:
    if denominador == 0:
        return None
    return 100.0 * float(numerador) / float(denominador)


def evaluate(pred: Volume, ref: Volume, ref_tree: Optional[SkeletonTree] = None,
             branch_detect_threshold: float = 0.8, case_id: str = '') -> EvalReport:
    """
    Avalia uma predição contra a referência.

    Args:
        pred: Predição binária.
        ref: Referência binária não vazia.
        ref_tree: Árvore da referência; calculada de ref se ausente.
        branch_detect_threshold: Fração mínima de voxels de linha central dentro
            da predição para um ramo contar como detectado.

    Returns:
        EvalReport em porcentagens.
    """
    require_same_geometry(pred, ref)
    if not 0.0 < branch_detect_threshold <= 1.0:
        raise UsageError(f"branch_detect_threshold deve estar em (0, 1], recebido {branch_detect_threshold}")
    p = as_mask(pred)
    r = as_mask(ref)
    if not r.any():
        raise EmptyMaskError("Avaliação com referência vazia")

    tree = ref_tree if ref_tree is not None else skeletonize(ref)
    if tuple(tree.dims) != r.shape:
        raise GeometryMismatchError(f"Árvore com dims {tree.dims} e referência com dims {r.shape}")

    cobertos = skeleton_length_inside(tree, pred)
    ramos = []
    for ramo in tree.branches:
        pts = np.asarray(ramo.voxels, dtype=np.int64)
        fracao = float(p[pts[:, 0], pts[:, 1], pts[:, 2]].mean())
        ramos.append(BranchDetection(
            branch_id=ramo.branch_id,
            generation=ramo.generation,
            covered_fraction=fracao,
            covered_length_mm=cobertos[ramo.branch_id],
            detected=fracao >= branch_detect_threshold,
        ))

    total = tree.total_length_mm
    detectado = float(sum(cobertos.values()))
    n_detectados = sum(1 for b in ramos if b.detected)

    acertos = int(np.count_nonzero(p & r))
    n_pred = int(np.count_nonzero(p))
    n_ref = int(np.count_nonzero(r))
    verdadeiros_negativos = int(np.count_nonzero(~p & ~r))

    relatorio = EvalReport(
        bd_pct=_pct(n_detectados, len(ramos)),
        tld_pct=_pct(detectado, total),
        precision_pct=_pct(acertos, n_pred),
        dsc_pct=_pct(2 * acertos, n_pred + n_ref),
        sensitivity_pct=_pct(acertos, n_ref),
        specificity_pct=_pct(verdadeiros_negativos, r.size - n_ref),
        n_branches_ref=len(ramos),
        n_branches_detected=n_detectados,
        total_length_mm=total,
        detected_length_mm=detectado,
        branch_detect_threshold=float(branch_detect_threshold),
        per_branch=ramos,
        case_id=case_id,
    )
    logger.info(f"Avaliação {case_id or ''}: BD={relatorio.bd_pct}, TLD={relatorio.tld_pct}, "
                f"precisão={relatorio.precision_pct}")
    return relatorio


@dataclass
class CorpusReport:
    """Agregado de um corpus: linhas por caso e média/desvio por métrica."""

    reports: List[EvalReport]
    frame: pd.DataFrame

    def summary(self) -> Dict[str, Dict[str, Optional[float]]]:
        resumo = {}
        for metrica in PCT_METRICS + ['total_length_mm', 'detected_length_mm']:
            coluna = pd.to_numeric(self.frame[metrica], errors='coerce').dropna()
            if coluna.empty:
                resumo[metrica] = {'mean': None, 'std': None, 'n': 0}
                continue
            desvio = float(coluna.std(ddof=1)) if len(coluna) > 1 else 0.0
            resumo[metrica] = {'mean': float(coluna.mean()), 'std': desvio, 'n': int(len(coluna))}
        return resumo

    def to_dict(self) -> Dict[str, Any]:
        return {
            'n_cases': len(self.reports),
            'summary': self.summary(),
            'cases': [r.to_dict() for r in self.reports],
        }

    def save_json(self, path: str) -> None:
        write_json(path, self.to_dict())

    def save_csv(self, path: str) -> None:
        with atomic_path(path) as tmp:
            self.frame.to_csv(tmp, index=False, columns=CSV_COLUMNS, na_rep='')


def aggregate_reports(reports: Sequence[EvalReport]) -> CorpusReport:
    """Monta o agregado a partir de relatórios já calculados."""
    if not reports:
        raise UsageError("Corpus vazio")
    frame = pd.DataFrame([r.row() for r in reports], columns=CSV_COLUMNS)
    return CorpusReport(reports=list(reports), frame=frame)


def evaluate_corpus(cases: Sequence[Tuple[Volume, Volume]], case_ids: Optional[Sequence[str]] = None,
                    ref_trees: Optional[Sequence[Optional[SkeletonTree]]] = None,
                    branch_detect_threshold: float = 0.8, threads: int = 1) -> CorpusReport:
    """
    Avalia um corpus de pares (pred, ref); a ordem das linhas segue a ordem dos casos.
    """
    if not cases:
        raise UsageError("Corpus vazio")
    ids = list(case_ids) if case_ids is not None else [f"caso_{i:03d}" for i in range(len(cases))]
    arvores = list(ref_trees) if ref_trees is not None else [None] * len(cases)
    if len(ids) != len(cases) or len(arvores) != len(cases):
        raise UsageError("case_ids e ref_trees devem ter o mesmo tamanho que cases")

    def _avaliar(i: int) -> EvalReport:
        pred, ref = cases[i]
        return evaluate(pred, ref, arvores[i], branch_detect_threshold, ids[i])

    with ThreadPoolExecutor(max_workers=max(1, int(threads))) as executor:
        relatorios = list(executor.map(_avaliar, range(len(cases))))
    logger.info(f"Corpus avaliado: {len(relatorios)} casos")
    return aggregate_reports(relatorios)
