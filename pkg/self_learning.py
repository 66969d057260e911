"""
Módulo de autoaprendizado guiado pela topologia
-----------------------------------------------
Ciclo iterativo: treina o segmentador, prediz, refina as predições em
pseudo-rótulos (fusão com a referência, reconexão de rupturas, componente
principal) e re-treina com partida a quente. Inclui a inferência final e a
gravação da execução em disco.
"""

import os
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Dict, List, Any, Optional, Sequence

import numpy as np

from errors import AirwayError, UsageError
from settings import RunConfig
from volume_core import Volume, mask_like, write_volume, write_json
from skeleton import SkeletonTree, skeletonize
from breakage import MAX_REFINE_ROUNDS, BreakageConnector, GeometricConnector, refine_pseudo_label
from metrics import EvalReport, CorpusReport, evaluate, aggregate_reports
from phantom import PhantomSpec, generate_phantom, degrade_labels
from segmenter import SegmenterInterface, SegmenterSnapshot, binarize

logger = logging.getLogger('self_learning')

# Rodadas de reconexão por modo de refinamento; 'lcc' só mantém a maior componente da fusão
REFINE_MODES = {'reconnect': MAX_REFINE_ROUNDS, 'lcc': 0}


@dataclass
class TrainingCase:
    """Caso do ciclo: CT, referência (possivelmente incompleta) e verdade opcional."""

    case_id: str
    ct: Volume
    label: Volume
    gt: Optional[Volume] = None
    gt_tree: Optional[SkeletonTree] = None


@dataclass
class IterationState:
    iter_index: int
    pseudo_labels: Dict[str, Volume]
    snapshot: SegmenterSnapshot
    reports: List[EvalReport]
    corpus: CorpusReport
    selected: bool = False


@dataclass
class SelfLearningResult:
    states: List[IterationState] = field(default_factory=list)
    selected_iter: Optional[int] = None
    aborted: bool = False
    abort_reason: str = ''

    @property
    def snapshots(self) -> List[SegmenterSnapshot]:
        return [s.snapshot for s in self.states]

    @property
    def selected_snapshot(self) -> Optional[SegmenterSnapshot]:
        for estado in self.states:
            if estado.selected:
                return estado.snapshot
        return None


def phantom_cases(spec: PhantomSpec, corpus_size: int, degrade_fraction: float,
                  seed: int) -> List[TrainingCase]:
    """
    Corpus de phantoms com rótulos de treino degradados; o caso i usa a semente
    seed + i para a geometria e o ruído.
    """
    casos = []
    for i in range(corpus_size):
        phantom = generate_phantom(replace(spec, seed=seed + i))
        degradado, _ = degrade_labels(phantom.gt_mask, phantom.gt_tree, degrade_fraction, seed + 1000 + i)
        casos.append(TrainingCase(case_id=f"phantom_{i:03d}", ct=phantom.ct, label=degradado,
                                  gt=phantom.gt_mask, gt_tree=phantom.gt_tree))
    return casos


def _refine_case(case: TrainingCase, segmenter: SegmenterInterface, snapshot: SegmenterSnapshot,
                 connector: BreakageConnector, gamma_mm: float, min_island_voxels: int,
                 max_rounds: int) -> Volume:
    prob = segmenter.predict(case.ct, snapshot)
    pred = binarize(prob, keep_largest=False, min_island_voxels=min_island_voxels)
    return refine_pseudo_label(pred, case.label, case.ct, connector, gamma_mm, max_rounds=max_rounds)


def iterate_self_learning(cases: Sequence[TrainingCase], segmenter: SegmenterInterface,
                          connector: Optional[BreakageConnector] = None, max_iters: int = 5,
                          select_iter: int = 3, gamma_mm: float = 5.0,
                          branch_detect_threshold: float = 0.8, min_island_voxels: int = 10,
                          threads: int = 1, refine_mode: str = 'reconnect') -> SelfLearningResult:
    """
    Executa o ciclo de autoaprendizado.

    A iteração 1 treina com os rótulos originais; cada iteração seguinte treina,
    a partir do snapshot anterior, com os pseudo-rótulos refinados. Cada
    iteração é avaliada contra a verdade (modo phantom) ou contra a referência
    original (modo clínico). Com refine_mode = 'lcc' os pseudo-rótulos são só a
    maior componente da fusão, sem reconexão de rupturas.

    Returns:
        SelfLearningResult com um estado por iteração concluída.
    """
    if not cases:
        raise UsageError("Ciclo de autoaprendizado sem casos")
    if max_iters < 1 or not 1 <= select_iter <= max_iters:
        raise UsageError(f"max_iters={max_iters} e select_iter={select_iter} inválidos")
    if refine_mode not in REFINE_MODES:
        raise UsageError(f"refine_mode deve ser um de {sorted(REFINE_MODES)}, recebido {refine_mode}")
    rodadas = REFINE_MODES[refine_mode]
    connector = connector or GeometricConnector()

    # Árvores de avaliação calculadas uma única vez por caso
    avaliacao = []
    for caso in cases:
        if caso.gt is not None:
            avaliacao.append((caso.gt, caso.gt_tree if caso.gt_tree is not None else skeletonize(caso.gt)))
        else:
            avaliacao.append((caso.label, skeletonize(caso.label)))

    resultado = SelfLearningResult()
    rotulos = {c.case_id: c.label for c in cases}
    snapshot: Optional[SegmenterSnapshot] = None
    for n in range(1, max_iters + 1):
        logger.info(f"Iteração {n}/{max_iters}")
        try:
            snapshot = segmenter.train([(c.ct, rotulos[c.case_id]) for c in cases], warm_start=snapshot)
        except AirwayError as e:
            if not resultado.states:
                raise
            logger.error(f"Treino falhou na iteração {n}: {str(e)}; mantendo snapshot da iteração {n - 1}")
            resultado.aborted = True
            resultado.abort_reason = str(e)
            break

        atual = snapshot
        with ThreadPoolExecutor(max_workers=max(1, int(threads))) as executor:
            pseudo = list(executor.map(
                lambda caso: _refine_case(caso, segmenter, atual, connector, gamma_mm, min_island_voxels, rodadas),
                cases,
            ))

        relatorios = [
            evaluate(p, ref, arvore, branch_detect_threshold, caso.case_id)
            for caso, p, (ref, arvore) in zip(cases, pseudo, avaliacao)
        ]
        estado = IterationState(
            iter_index=n,
            pseudo_labels={c.case_id: p for c, p in zip(cases, pseudo)},
            snapshot=snapshot,
            reports=relatorios,
            corpus=aggregate_reports(relatorios),
        )
        resultado.states.append(estado)
        rotulos = dict(estado.pseudo_labels)
        resumo = estado.corpus.summary()
        logger.info(f"Iteração {n}: TLD médio {resumo['tld_pct']['mean']}, "
                    f"BD médio {resumo['bd_pct']['mean']}, precisão média {resumo['precision_pct']['mean']}")

    escolhido = min(select_iter, len(resultado.states))
    resultado.states[escolhido - 1].selected = True
    resultado.selected_iter = escolhido
    return resultado


def run_inference(ct: Volume, segmenter: SegmenterInterface, snapshot: SegmenterSnapshot,
                  connector: Optional[BreakageConnector] = None, gamma_mm: float = 5.0,
                  min_island_voxels: int = 10, threads: int = 1) -> Volume:
    """Predição final: binariza, reconecta rupturas e mantém a maior componente."""
    prob = segmenter.predict(ct, snapshot)
    pred = binarize(prob, keep_largest=False, min_island_voxels=min_island_voxels)
    vazio = mask_like(np.zeros(pred.dims, dtype=bool), pred)
    return refine_pseudo_label(pred, vazio, ct, connector or GeometricConnector(), gamma_mm, threads=threads)


# Chaves que só afetam a execução, não o conteúdo gravado
EXECUTION_KEYS = ('threads', 'output_dir')


def _manifest_config(config: Optional[RunConfig]) -> Optional[Dict[str, Any]]:
    if config is None:
        return None
    return {k: v for k, v in config.to_dict().items() if k not in EXECUTION_KEYS}


def write_run(result: SelfLearningResult, out_dir: str, config: Optional[RunConfig] = None) -> str:
    """
    Grava iter_<n>/ com pseudo-rótulos, relatórios e snapshot, mais
    run_manifest.json no diretório de saída. O manifesto omite EXECUTION_KEYS,
    então a mesma semente gera os mesmos bytes com qualquer número de threads.

    Returns:
        Caminho do manifesto.
    """
    os.makedirs(out_dir, exist_ok=True)
    iteracoes: List[Dict[str, Any]] = []
    for estado in result.states:
        pasta = os.path.join(out_dir, f"iter_{estado.iter_index}")
        os.makedirs(pasta, exist_ok=True)
        for case_id, volume in sorted(estado.pseudo_labels.items()):
            write_volume(volume, os.path.join(pasta, f"pseudo_{case_id}.mhd"))
        estado.corpus.save_json(os.path.join(pasta, 'report.json'))
        estado.corpus.save_csv(os.path.join(pasta, 'report.csv'))
        estado.snapshot.save(os.path.join(pasta, 'snapshot.json'))
        iteracoes.append({
            'iter': estado.iter_index,
            'snapshot_id': estado.snapshot.snapshot_id,
            'selected': estado.selected,
            'summary': estado.corpus.summary(),
        })

    manifesto = os.path.join(out_dir, 'run_manifest.json')
    write_json(manifesto, {
        'config': _manifest_config(config),
        'iterations': iteracoes,
        'selected_iter': result.selected_iter,
        'aborted': result.aborted,
        'abort_reason': result.abort_reason,
    })
    logger.info(f"Execução gravada em {out_dir}")
    return manifesto
