"""Testes do gerador de phantoms e da degradação de rótulos."""

import json

import numpy as np
import pytest

from errors import DataError, UsageError
from volume_core import as_mask, connected_components, read_volume
from skeleton import SkeletonTree
from phantom import PhantomSpec, generate_phantom, effective_generations, degrade_labels, delete_branches
from conftest import SMALL_SPEC


def test_topologia_da_arvore_binaria(small_phantom):
    tree = small_phantom.gt_tree
    assert small_phantom.generations == 4
    assert len(tree.branches) == 15
    assert len(tree.leaves()) == 8
    por_geracao = {}
    for ramo in tree.branches:
        por_geracao[ramo.generation] = por_geracao.get(ramo.generation, 0) + 1
    assert por_geracao == {0: 1, 1: 2, 2: 4, 3: 8}
    for ramo in tree.branches:
        if ramo.parent is not None:
            assert tree.branch_map()[ramo.parent].voxels[-1] == ramo.voxels[0]


def test_irmaos_compartilham_so_a_juncao(small_phantom):
    tree = small_phantom.gt_tree
    donos = {}
    for ramo in tree.branches:
        for v in ramo.voxels[1:]:
            assert v not in donos, f"voxel {v} nos ramos {donos[v]} e {ramo.branch_id}"
            donos[v] = ramo.branch_id


def test_mascara_conexa_e_contem_o_eixo(small_phantom):
    m = as_mask(small_phantom.gt_mask)
    assert connected_components(small_phantom.gt_mask).count == 1
    assert all(m[v] for ramo in small_phantom.gt_tree.branches for v in ramo.voxels)


def test_raiz_no_topo(small_phantom):
    m = as_mask(small_phantom.gt_mask)
    z_topo = int(np.nonzero(m.any(axis=(0, 1)))[0].max())
    assert abs(small_phantom.gt_tree.root[2] - z_topo) <= 3


def test_ct_com_intensidades_de_lumen_e_parenquima(small_phantom):
    ct = small_phantom.ct.data.astype(np.float64)
    m = as_mask(small_phantom.gt_mask)
    assert small_phantom.ct.element_kind == 'hu16'
    assert ct[m].mean() == pytest.approx(-1000, abs=10)
    assert ct[~m].mean() < -600
    assert small_phantom.ct.same_geometry(small_phantom.gt_mask)


def test_mesma_semente_mesmo_phantom(small_phantom):
    outro = generate_phantom(PhantomSpec(seed=0, **SMALL_SPEC))
    assert outro.ct.equals(small_phantom.ct)
    assert outro.gt_tree.to_dict() == small_phantom.gt_tree.to_dict()


def test_sementes_diferentes_mudam_o_ruido(small_phantom, small_phantom_b):
    assert not np.array_equal(small_phantom.ct.data, small_phantom_b.ct.data)


def test_geracoes_limitadas_pela_resolucao():
    spec = PhantomSpec(generations=10, trunk_radius_mm=3.0, trunk_length_mm=10.0, radius_decay=0.5)
    assert effective_generations(spec) == 2
    phantom = generate_phantom(spec)
    assert phantom.clamped
    assert phantom.generations == 2
    assert len(phantom.gt_tree.branches) == 3


def test_raio_menor_que_um_voxel():
    with pytest.raises(DataError):
        generate_phantom(PhantomSpec(trunk_radius_mm=0.5))


def test_grade_pequena_demais():
    with pytest.raises(DataError):
        generate_phantom(PhantomSpec(dims=(10, 10, 10), **SMALL_SPEC))


@pytest.mark.parametrize('campo,valor', [
    ('generations', 0), ('radius_decay', 1.0), ('children_per_junction', 1), ('angle_jitter_deg', 40.0),
    ('psf_sigma_mm', -0.5),
])
def test_parametros_invalidos(campo, valor):
    with pytest.raises(UsageError):
        PhantomSpec(**{campo: valor}).validate()


def test_chave_desconhecida():
    with pytest.raises(UsageError):
        PhantomSpec.from_dict({'ramos': 3})


def test_comprimentos_analiticos(small_phantom):
    analiticos = small_phantom.analytic_lengths_mm
    assert analiticos[1] == pytest.approx(16.0)
    assert analiticos[2] == pytest.approx(16.0 * 0.8)
    for ramo in small_phantom.gt_tree.branches:
        assert ramo.length_mm == pytest.approx(analiticos[ramo.branch_id], rel=0.35)


def test_salva_arquivos(tmp_path, small_phantom):
    small_phantom.save(str(tmp_path))
    assert read_volume(str(tmp_path / 'gt.mhd')).equals(small_phantom.gt_mask)
    tree = SkeletonTree.load(str(tmp_path / 'gt_tree.json'))
    assert len(tree.branches) == 15
    resumo = json.loads((tmp_path / 'phantom.json').read_text())
    assert resumo['n_branches'] == 15 and resumo['schema_version'] == '1.0'


def test_degradacao_apaga_fracao_de_folhas(small_phantom):
    degradado, apagados = degrade_labels(small_phantom.gt_mask, small_phantom.gt_tree, 0.3, seed=5)
    folhas = {b.branch_id for b in small_phantom.gt_tree.leaves()}
    assert len(apagados) == 2
    assert set(apagados) <= folhas
    m = as_mask(small_phantom.gt_mask)
    d = as_mask(degradado)
    assert not (d & ~m).any()
    assert d.sum() < m.sum()
    de_novo, mesmos = degrade_labels(small_phantom.gt_mask, small_phantom.gt_tree, 0.3, seed=5)
    assert mesmos == apagados and de_novo.equals(degradado)


def test_degradacao_nula(small_phantom):
    degradado, apagados = degrade_labels(small_phantom.gt_mask, small_phantom.gt_tree, 0.0, seed=1)
    assert apagados == []
    assert degradado.equals(small_phantom.gt_mask)


def test_apagar_ramo_mantem_a_juncao(small_phantom):
    folha = small_phantom.gt_tree.leaves()[0]
    restante = as_mask(delete_branches(small_phantom.gt_mask, small_phantom.gt_tree, [folha.branch_id]))
    assert restante[folha.voxels[0]]
    assert not restante[folha.voxels[-1]]


def test_desfoque_clareia_o_lumen_junto_a_parede():
    base = dict(SMALL_SPEC, noise_sigma_hu=0.0, seed=5)
    nitido = generate_phantom(PhantomSpec(**dict(base, psf_sigma_mm=0.0)))
    borrado = generate_phantom(PhantomSpec(**dict(base, psf_sigma_mm=0.7)))
    assert borrado.gt_mask.equals(nitido.gt_mask)
    m = as_mask(nitido.gt_mask)
    spec = PhantomSpec()
    assert np.all(nitido.ct.data[m] == spec.lumen_hu)
    assert borrado.ct.data[m].mean() > spec.lumen_hu + 20
    assert np.all(borrado.ct.data[m] >= spec.lumen_hu)
