"""
Linha de comando do toolkit de vias aéreas
------------------------------------------
Um subcomando por operação: phantom, decompose, skeletonize, attention,
simulate-breakage, connect, refine, segment, iterate, evaluate e loss.

Códigos de saída: 0 sucesso, 1 erro de uso, 2 erro de dados, 3 erro interno.
"""

import sys
import json
import logging
import argparse
from typing import Dict, List, Any, Optional

import numpy as np

from errors import AirwayError, UsageError
from settings import SCHEMA_VERSION, RunConfig, configure_logging, load_run_config
from volume_core import as_mask, mask_like, read_volume, write_volume, write_json
from skeleton import SkeletonTree, skeletonize
from anatomy import AmcLabel, decompose_amc
from breakage import (
    GeometricConnector, breakage_attention, simulate_breakage, sample_patches, refine_pseudo_label,
    paste_fill,
)
from metrics import evaluate
from losses import ProbVolume, loss_report
from phantom import PhantomSpec, generate_phantom
from segmenter import ClassicalSegmenter, SegmenterSnapshot
from self_learning import (
    TrainingCase, iterate_self_learning, phantom_cases, run_inference, write_run,
)

logger = logging.getLogger('cli')


class ArgumentParser(argparse.ArgumentParser):
    """Parser que transforma erros de argumentos em UsageError."""

    def error(self, message):
        raise UsageError(message)


def _common_options() -> argparse.ArgumentParser:
    comum = ArgumentParser(add_help=False)
    comum.add_argument('--json', action='store_true', help='Resumo JSON na saída padrão')
    comum.add_argument('--threads', type=int, default=None, help='Número de threads')
    comum.add_argument('--log-level', default=None, help='DEBUG, INFO, WARNING, ...')
    comum.add_argument('--config', default=None, help='Arquivo JSON de configuração')
    return comum


def build_parser() -> ArgumentParser:
    comum = _common_options()
    parser = ArgumentParser(prog='airway', description='Topologia de árvores de vias aéreas')
    sub = parser.add_subparsers(dest='command', parser_class=ArgumentParser)
    sub.required = True

    p = sub.add_parser('phantom', parents=[comum], help='Gera um phantom sintético')
    p.add_argument('--out', required=True)
    p.add_argument('--seed', type=int, required=True)
    p.add_argument('--generations', type=int, default=None)
    p.add_argument('--trunk-radius', type=float, default=None)
    p.add_argument('--trunk-length', type=float, default=None)
    p.add_argument('--noise-sigma', type=float, default=None)
    p.add_argument('--psf-sigma', type=float, default=None, help='Desfoque de volume parcial (mm)')
    p.add_argument('--spacing', type=float, nargs=3, default=None)

    p = sub.add_parser('decompose', parents=[comum], help='Decomposição multi-classe anatômica')
    p.add_argument('--mask', required=True)
    p.add_argument('--out', required=True)
    p.add_argument('--cutoffs', type=int, nargs=2, default=None)

    p = sub.add_parser('skeletonize', parents=[comum], help='Esqueleto e árvore de ramos')
    p.add_argument('--mask', required=True)
    p.add_argument('--out', required=True)
    p.add_argument('--root', type=int, nargs=3, default=None)

    p = sub.add_parser('attention', parents=[comum], help='Mapa de atenção de rupturas')
    p.add_argument('--mask', required=True)
    p.add_argument('--gamma', type=float, default=None)
    p.add_argument('--out-raw', default=None)
    p.add_argument('--out-normalized', default=None)

    p = sub.add_parser('simulate-breakage', parents=[comum], help='Simula rupturas em ramos periféricos')
    p.add_argument('--mask', required=True)
    p.add_argument('--out', required=True)
    p.add_argument('--seed', type=int, required=True)
    p.add_argument('--branch-fraction', type=float, default=None)
    p.add_argument('--removal-range', type=float, nargs=2, default=None)
    p.add_argument('--tree', default=None)

    p = sub.add_parser('connect', parents=[comum], help='Conector geométrico sobre os centros de ruptura')
    p.add_argument('--ct', required=True)
    p.add_argument('--label', required=True)
    p.add_argument('--out', required=True)
    p.add_argument('--gamma', type=float, default=None)

    p = sub.add_parser('refine', parents=[comum], help='Refinamento de pseudo-rótulo')
    p.add_argument('--pred', required=True)
    p.add_argument('--ref', required=True)
    p.add_argument('--ct', required=True)
    p.add_argument('--out', required=True)
    p.add_argument('--gamma', type=float, default=None)

    p = sub.add_parser('segment', parents=[comum], help='Treina e/ou aplica o segmentador clássico')
    p.add_argument('--ct', required=True)
    p.add_argument('--out', required=True)
    p.add_argument('--snapshot', default=None, help='Snapshot já treinado')
    p.add_argument('--train', nargs=2, action='append', metavar=('CT', 'LABEL'), default=None)
    p.add_argument('--save-snapshot', default=None)
    p.add_argument('--out-prob', default=None, help='Probabilidade de via aérea (real32)')
    p.add_argument('--seed', type=int, default=None)

    p = sub.add_parser('iterate', parents=[comum], help='Ciclo de autoaprendizado')
    p.add_argument('--out', default=None)
    p.add_argument('--seed', type=int, required=True)
    p.add_argument('--max-iters', type=int, default=None)
    p.add_argument('--select-iter', type=int, default=None)
    p.add_argument('--corpus-size', type=int, default=None)
    p.add_argument('--degrade-fraction', type=float, default=None)
    p.add_argument('--gamma', type=float, default=None)
    p.add_argument('--refine', dest='refine_mode', choices=['reconnect', 'lcc'], default=None,
                   help="Refinamento dos pseudo-rótulos: 'reconnect' ou só a maior componente ('lcc')")

    p = sub.add_parser('evaluate', parents=[comum], help='Métricas de avaliação')
    p.add_argument('--pred', required=True)
    p.add_argument('--ref', required=True)
    p.add_argument('--ref-tree', default=None)
    p.add_argument('--threshold', type=float, default=None)
    p.add_argument('--out', default=None)

    p = sub.add_parser('loss', parents=[comum], help='Perdas sobre volumes de probabilidade')
    p.add_argument('--prob', nargs='+', required=True, help='Um volume real32 por classe, fundo primeiro')
    group = p.add_mutually_exclusive_group(required=True)
    group.add_argument('--ref', default=None, help='Máscara binária (decomposta em classes AMC)')
    group.add_argument('--amc', default=None, help='Rótulo AMC com sidecar JSON')
    p.add_argument('--cutoffs', type=int, nargs=2, default=None)
    p.add_argument('--lambda', dest='lam', type=float, default=None)
    p.add_argument('--alpha', type=float, default=0.3)
    p.add_argument('--r', type=float, default=0.7)
    p.add_argument('--out', default=None)
    return parser


def _config(args, **overrides) -> RunConfig:
    overrides['threads'] = args.threads
    if getattr(args, 'seed', None) is not None:
        overrides['seed'] = args.seed
    return load_run_config(args.config, overrides)


# ---------------------------------------------------------------------------
# Subcomandos
# ---------------------------------------------------------------------------

def cmd_phantom(args) -> Dict[str, Any]:
    config = _config(args)
    valores = dict(config.phantom)
    for chave, flag in (('generations', args.generations), ('trunk_radius_mm', args.trunk_radius),
                        ('trunk_length_mm', args.trunk_length), ('noise_sigma_hu', args.noise_sigma),
                        ('psf_sigma_mm', args.psf_sigma), ('spacing', args.spacing)):
        if flag is not None:
            valores[chave] = flag
    valores['seed'] = args.seed
    spec = PhantomSpec.from_dict(valores).validate()
    phantom = generate_phantom(spec)
    phantom.save(args.out)
    return {
        'out': args.out,
        'n_branches': len(phantom.gt_tree.branches),
        'generations': phantom.generations,
        'clamped': phantom.clamped,
        'dims': list(phantom.ct.dims),
    }


def cmd_decompose(args) -> Dict[str, Any]:
    config = _config(args, cutoffs=args.cutoffs)
    label = decompose_amc(read_volume(args.mask), config.cutoffs)
    label.save(args.out)
    return {'out': args.out, 'counts': label.counts(), 'generation_cutoffs': list(label.generation_cutoffs)}


def cmd_skeletonize(args) -> Dict[str, Any]:
    _config(args)
    tree = skeletonize(read_volume(args.mask), tuple(args.root) if args.root else None)
    tree.save(args.out)
    return {
        'out': args.out,
        'n_branches': len(tree.branches),
        'n_leaves': len(tree.leaves()),
        'total_length_mm': tree.total_length_mm,
        'root': list(tree.root),
    }


def cmd_attention(args) -> Dict[str, Any]:
    config = _config(args, gamma_mm=args.gamma)
    atencao = breakage_attention(read_volume(args.mask), config.gamma_mm)
    if args.out_raw:
        write_volume(atencao.raw, args.out_raw)
    if args.out_normalized:
        write_volume(atencao.normalized, args.out_normalized)
    return atencao.summary()


def cmd_simulate_breakage(args) -> Dict[str, Any]:
    config = _config(args, branch_fraction=args.branch_fraction, removal_range=args.removal_range)
    mask = read_volume(args.mask)
    tree = SkeletonTree.load(args.tree) if args.tree else None
    amostra = simulate_breakage(mask, config.branch_fraction, config.removal_range, args.seed, tree)
    amostra.save(args.out)
    resumo = amostra.manifest()
    resumo['out'] = args.out
    resumo['breakage_voxels'] = int(as_mask(amostra.breakage_gt).sum())
    return resumo


def cmd_connect(args) -> Dict[str, Any]:
    config = _config(args, gamma_mm=args.gamma)
    ct = read_volume(args.ct)
    label = read_volume(args.label)
    atencao = breakage_attention(label, config.gamma_mm)
    pedidos = sample_patches(atencao, ct, label, jitter_vox=0, patch_size=config.patch_size)
    conector = GeometricConnector()
    preenchimento = np.zeros(label.dims, dtype=bool)
    for pedido in pedidos:
        paste_fill(preenchimento, as_mask(conector.connect(pedido)), pedido.patch_origin)
    write_volume(mask_like(preenchimento, label), args.out)
    return {'out': args.out, 'n_patches': len(pedidos), 'fill_voxels': int(preenchimento.sum())}


def cmd_refine(args) -> Dict[str, Any]:
    config = _config(args, gamma_mm=args.gamma)
    refinado = refine_pseudo_label(read_volume(args.pred), read_volume(args.ref), read_volume(args.ct),
                                   GeometricConnector(), config.gamma_mm, config.patch_size, config.threads)
    write_volume(refinado, args.out)
    return {'out': args.out, 'voxels': int(as_mask(refinado).sum())}


def _segmenter(config: RunConfig) -> ClassicalSegmenter:
    return ClassicalSegmenter(
        use_amc=config.segmenter.use_amc,
        cutoffs=config.cutoffs,
        ema_factor=config.segmenter.ema_factor,
        max_samples_per_class=config.segmenter.max_samples_per_class,
        seed=config.seed if config.seed is not None else 0,
        background_components=config.segmenter.background_components,
    )


def cmd_segment(args) -> Dict[str, Any]:
    if bool(args.snapshot) == bool(args.train):
        raise UsageError("Informe --snapshot ou --train (exatamente um)")
    if args.train and args.seed is None:
        raise UsageError("--seed é obrigatório para treinar")
    config = _config(args)
    segmenter = _segmenter(config)
    if args.snapshot:
        snapshot = SegmenterSnapshot.load(args.snapshot)
    else:
        snapshot = segmenter.train([(read_volume(ct), read_volume(lab)) for ct, lab in args.train])
        if args.save_snapshot:
            snapshot.save(args.save_snapshot)
    ct = read_volume(args.ct)
    if args.out_prob:
        write_volume(segmenter.predict(ct, snapshot).foreground_volume(), args.out_prob)
    mascara = run_inference(ct, segmenter, snapshot, GeometricConnector(), config.gamma_mm,
                            config.segmenter.min_island_voxels, config.threads)
    write_volume(mascara, args.out)
    return {'out': args.out, 'snapshot_id': snapshot.snapshot_id, 'voxels': int(as_mask(mascara).sum())}


def cmd_iterate(args) -> Dict[str, Any]:
    config = _config(args, max_iters=args.max_iters, select_iter=args.select_iter,
                     corpus_size=args.corpus_size, degrade_fraction=args.degrade_fraction,
                     gamma_mm=args.gamma, output_dir=args.out, refine_mode=args.refine_mode)
    if config.cases:
        casos = []
        for item in config.cases:
            if 'id' not in item or 'ct' not in item or 'label' not in item:
                raise UsageError(f"Caso mal especificado na configuração: {item}")
            gt = read_volume(item['gt']) if item.get('gt') else None
            casos.append(TrainingCase(case_id=str(item['id']), ct=read_volume(item['ct']),
                                      label=read_volume(item['label']), gt=gt))
        modo = 'clinico'
    else:
        spec = PhantomSpec.from_dict(dict(config.phantom)).validate()
        casos = phantom_cases(spec, config.corpus_size, config.degrade_fraction, args.seed)
        modo = 'phantom'

    resultado = iterate_self_learning(
        casos, _segmenter(config), GeometricConnector(), config.max_iters, config.select_iter,
        config.gamma_mm, config.branch_detect_threshold, config.segmenter.min_island_voxels, config.threads,
        config.refine_mode,
    )
    manifesto = write_run(resultado, config.output_dir, config)
    return {
        'mode': modo,
        'refine_mode': config.refine_mode,
        'manifest': manifesto,
        'selected_iter': resultado.selected_iter,
        'aborted': resultado.aborted,
        'tld_mean_by_iter': [s.corpus.summary()['tld_pct']['mean'] for s in resultado.states],
    }


def cmd_evaluate(args) -> Dict[str, Any]:
    config = _config(args, branch_detect_threshold=args.threshold)
    arvore = SkeletonTree.load(args.ref_tree) if args.ref_tree else None
    relatorio = evaluate(read_volume(args.pred), read_volume(args.ref), arvore,
                         config.branch_detect_threshold)
    if args.out:
        relatorio.save(args.out)
    resumo = relatorio.to_dict()
    resumo.pop('per_branch')
    return resumo


def cmd_loss(args) -> Dict[str, Any]:
    config = _config(args, cutoffs=args.cutoffs, lambda_gul=args.lam)
    canais = [read_volume(p) for p in args.prob]
    for canal in canais[1:]:
        if not canais[0].same_geometry(canal):
            raise UsageError("Volumes de probabilidade com grades diferentes")
    prob = ProbVolume(np.stack([c.data for c in canais]), canais[0].spacing, canais[0].origin)
    amc = AmcLabel.load(args.amc) if args.amc else decompose_amc(read_volume(args.ref), config.cutoffs)
    relatorio = loss_report(prob, amc, config.lambda_gul, args.alpha, args.r)
    if args.out:
        write_json(args.out, relatorio)
    return relatorio


COMMANDS = {
    'phantom': cmd_phantom,
    'decompose': cmd_decompose,
    'skeletonize': cmd_skeletonize,
    'attention': cmd_attention,
    'simulate-breakage': cmd_simulate_breakage,
    'connect': cmd_connect,
    'refine': cmd_refine,
    'segment': cmd_segment,
    'iterate': cmd_iterate,
    'evaluate': cmd_evaluate,
    'loss': cmd_loss,
}


def main(argv: Optional[List[str]] = None) -> int:
    """Executa um subcomando e devolve o código de saída."""
    try:
        args = build_parser().parse_args(argv)
        configure_logging(args.log_level)
        resumo = COMMANDS[args.command](args)
    except AirwayError as e:
        logger.error(f"{type(e).__name__}: {str(e)}")
        return e.exit_code
    except Exception as e:
        logger.exception(f"Erro interno: {str(e)}")
        return 3

    if args.json:
        saida = {'schema_version': SCHEMA_VERSION, 'command': args.command}
        saida.update(resumo)
        print(json.dumps(saida, sort_keys=True, default=float))
    return 0


if __name__ == '__main__':
    sys.exit(main())
