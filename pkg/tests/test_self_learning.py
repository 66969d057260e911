"""Testes do ciclo de autoaprendizado."""

import json
import os

import numpy as np
import pytest

from errors import DegenerateLabelError, UsageError
from volume_core import as_mask, connected_components, largest_component
from metrics import evaluate
from phantom import PhantomSpec
import segmenter as segmenter_module
from segmenter import ClassicalSegmenter
from settings import RunConfig
from self_learning import phantom_cases, iterate_self_learning, run_inference, write_run
from conftest import SMALL_SPEC


@pytest.fixture(scope='module')
def cases():
    return phantom_cases(PhantomSpec(**SMALL_SPEC), corpus_size=2, degrade_fraction=0.3, seed=4)


@pytest.fixture(scope='module')
def result(cases):
    return iterate_self_learning(cases, ClassicalSegmenter(use_amc=False, seed=0), max_iters=2, select_iter=2)


class FailingSegmenter:
    """Segmentador que falha a partir da chamada de treino número `fail_at`."""

    def __init__(self, fail_at):
        self.inner = ClassicalSegmenter(use_amc=False, seed=0)
        self.fail_at = fail_at
        self.calls = 0

    def train(self, cases, warm_start=None):
        self.calls += 1
        if self.calls >= self.fail_at:
            raise DegenerateLabelError("falha simulada")
        return self.inner.train(cases, warm_start)

    def predict(self, ct, snapshot):
        return self.inner.predict(ct, snapshot)


def test_corpus_de_phantoms(cases):
    assert [c.case_id for c in cases] == ['phantom_000', 'phantom_001']
    for caso in cases:
        rotulo = as_mask(caso.label)
        verdade = as_mask(caso.gt)
        assert not (rotulo & ~verdade).any()
        assert rotulo.sum() < verdade.sum()
        assert caso.ct.same_geometry(caso.label)
    assert not np.array_equal(cases[0].ct.data, cases[1].ct.data)


def test_uma_iteracao_por_estado(result):
    assert [s.iter_index for s in result.states] == [1, 2]
    assert result.selected_iter == 2
    assert result.selected_snapshot is result.states[1].snapshot
    assert not result.aborted
    assert len(result.snapshots) == 2


def test_pseudo_rotulos_conexos_e_contem_a_referencia(cases, result):
    for estado in result.states:
        for caso in cases:
            pseudo = estado.pseudo_labels[caso.case_id]
            assert connected_components(pseudo).count == 1
            base = as_mask(largest_component(caso.label))
            assert not (base & ~as_mask(pseudo)).any()


def test_tld_nao_piora_em_relacao_ao_rotulo_degradado(cases, result):
    for caso, relatorio in zip(cases, result.states[-1].reports):
        base = evaluate(largest_component(caso.label), caso.gt, caso.gt_tree)
        assert relatorio.tld_pct >= base.tld_pct - 1e-9


def test_falha_depois_da_primeira_iteracao_mantem_o_anterior(cases):
    resultado = iterate_self_learning(cases, FailingSegmenter(fail_at=2), max_iters=3, select_iter=3)
    assert resultado.aborted
    assert len(resultado.states) == 1
    assert resultado.selected_iter == 1
    assert 'falha simulada' in resultado.abort_reason


def test_falha_na_primeira_iteracao_propaga(cases):
    with pytest.raises(DegenerateLabelError):
        iterate_self_learning(cases, FailingSegmenter(fail_at=1), max_iters=2, select_iter=1)


def test_parametros_invalidos(cases):
    with pytest.raises(UsageError):
        iterate_self_learning(cases, ClassicalSegmenter(), max_iters=2, select_iter=3)
    with pytest.raises(UsageError):
        iterate_self_learning([], ClassicalSegmenter())


def test_inferencia_final_em_uma_componente(cases, result):
    segmenter = ClassicalSegmenter(use_amc=False, seed=0)
    mascara = run_inference(cases[0].ct, segmenter, result.selected_snapshot)
    assert connected_components(mascara).count == 1
    assert mascara.same_geometry(cases[0].ct)


def test_gravacao_da_execucao(tmp_path, result):
    manifesto = write_run(result, str(tmp_path), RunConfig(seed=4, max_iters=2, select_iter=2))
    dados = json.loads(open(manifesto).read())
    assert dados['selected_iter'] == 2
    assert dados['config']['seed'] == 4
    assert [i['iter'] for i in dados['iterations']] == [1, 2]
    pasta = tmp_path / 'iter_1'
    for nome in ('report.json', 'report.csv', 'snapshot.json', 'pseudo_phantom_000.mhd'):
        assert (pasta / nome).exists()
    assert not any(nome.endswith('.partial') for nome in os.listdir(pasta))


def test_modo_so_maior_componente_nao_reconecta(cases, result):
    so_lcc = iterate_self_learning(cases, ClassicalSegmenter(use_amc=False, seed=0), max_iters=1,
                                   select_iter=1, refine_mode='lcc')
    for caso in cases:
        pseudo = as_mask(so_lcc.states[0].pseudo_labels[caso.case_id])
        reconectado = as_mask(result.states[0].pseudo_labels[caso.case_id])
        assert not (pseudo & ~reconectado).any()
        assert connected_components(so_lcc.states[0].pseudo_labels[caso.case_id]).count == 1


def test_modo_de_refinamento_invalido(cases):
    with pytest.raises(UsageError):
        iterate_self_learning(cases, ClassicalSegmenter(use_amc=False), refine_mode='dilatar')


def test_falha_numerica_no_segundo_treino_mantem_o_anterior(monkeypatch, cases):
    original = segmenter_module.GaussianMixture
    chamadas = []

    def mistura(**kwargs):
        chamadas.append(kwargs)
        if len(chamadas) >= 2:
            raise np.linalg.LinAlgError("matriz singular")
        return original(**kwargs)

    monkeypatch.setattr(segmenter_module, 'GaussianMixture', mistura)
    resultado = iterate_self_learning(cases, ClassicalSegmenter(use_amc=False, seed=0), max_iters=3, select_iter=3)
    assert resultado.aborted
    assert len(resultado.states) == 1
    assert resultado.selected_iter == 1
    assert 'singular' in resultado.abort_reason
