"""Testes de esqueletização, análise de ramos e propagação de rótulos."""

import math

import numpy as np
import pytest

from errors import DataError, EmptyMaskError, DisconnectedSkeletonError, UsageError, GeometryMismatchError
from volume_core import Volume, as_mask, dilate
from phantom import PhantomSpec, generate_phantom
from skeleton import (
    SkeletonTree, parse_branches, skeletonize, nearest_group_labels, propagate_labels,
    skeleton_length_inside, chain_length,
)

ROOT = (5, 5, 10)


def _y_voxels():
    voxels = [(5, 5, z) for z in range(10, 4, -1)]
    for i in range(1, 5):
        voxels.append((5 + i, 5, 5 - i))
        voxels.append((5 - i, 5, 5 - i))
    return voxels


def _volume_de(voxels, dims=(12, 12, 12)):
    dados = np.zeros(dims, dtype=np.uint8)
    for v in voxels:
        dados[v] = 1
    return Volume(dados)


@pytest.fixture
def y_skeleton():
    return _volume_de(_y_voxels())


def test_y_tem_tres_ramos_com_geracoes(y_skeleton):
    tree = parse_branches(y_skeleton, ROOT)
    assert [b.branch_id for b in tree.branches] == [1, 2, 3]
    raiz, esquerdo, direito = tree.branches
    assert raiz.parent is None and raiz.generation == 0
    assert raiz.voxels[0] == ROOT and raiz.voxels[-1] == (5, 5, 5)
    assert raiz.length_mm == pytest.approx(5.0)
    # filhos ordenados pelo índice raster do voxel seguinte à junção
    assert esquerdo.voxels[:2] == [(5, 5, 5), (4, 5, 4)]
    assert direito.voxels[:2] == [(5, 5, 5), (6, 5, 4)]
    for filho in (esquerdo, direito):
        assert filho.parent == 1 and filho.generation == 1
        assert filho.length_mm == pytest.approx(4 * math.sqrt(2))
    assert [b.branch_id for b in tree.leaves()] == [2, 3]
    assert tree.total_length_mm == pytest.approx(5.0 + 8 * math.sqrt(2))


def test_espessura_do_esqueleto_nao_vira_ramo():
    voxels = _y_voxels() + [(6, 5, 8)]
    tree = parse_branches(_volume_de(voxels), ROOT)
    assert len(tree.branches) == 3
    assert len(tree.nodes) == len(voxels)


def test_esqueleto_desconexo():
    with pytest.raises(DisconnectedSkeletonError):
        parse_branches(_volume_de([(1, 1, 1), (5, 5, 5)]), (1, 1, 1))


def test_raiz_fora_do_esqueleto(y_skeleton):
    with pytest.raises(DataError):
        parse_branches(y_skeleton, (0, 0, 0))


def test_esqueleto_vazio():
    with pytest.raises(EmptyMaskError):
        parse_branches(_volume_de([]), ROOT)


def test_raios_medios_vem_da_mascara(y_skeleton):
    mascara = dilate(y_skeleton, 1)
    tree = parse_branches(y_skeleton, ROOT, mask=mascara)
    assert all(b.mean_radius_mm >= 1.0 for b in tree.branches)


def test_arvore_salva_e_carrega(tmp_path, y_skeleton):
    tree = parse_branches(y_skeleton, ROOT)
    tree.save(str(tmp_path / 'tree.json'))
    carregada = SkeletonTree.load(str(tmp_path / 'tree.json'))
    assert carregada.to_dict() == tree.to_dict()
    assert carregada.root_branch_id == 1


def test_comprimento_de_cadeia_anisotropico():
    assert chain_length([(0, 0, 0), (1, 0, 0), (1, 0, 1)], (0.5, 1.0, 2.0)) == pytest.approx(2.5)
    assert chain_length([(0, 0, 0)], (1.0, 1.0, 1.0)) == 0.0


def test_esqueleto_de_tubo_reto(tube):
    tree = skeletonize(tube)
    m = as_mask(tube)
    assert tree.root[2] == 37
    assert all(m[v] for v in tree.nodes)
    assert 25.0 <= tree.total_length_mm <= 40.0
    assert tree.branches[0].generation == 0


def test_esqueletizacao_deterministica(small_phantom):
    a = skeletonize(small_phantom.gt_mask)
    b = skeletonize(small_phantom.gt_mask)
    assert a.to_dict() == b.to_dict()
    m = as_mask(small_phantom.gt_mask)
    assert all(m[v] for v in a.nodes)
    assert len(a.leaves()) >= 4
    assert max(r.generation for r in a.branches) >= 2


def test_raiz_sugerida_fora_da_mascara(tube):
    with pytest.raises(DataError):
        skeletonize(tube, root_hint=(0, 0, 0))


def test_esqueletizacao_de_mascara_vazia():
    with pytest.raises(EmptyMaskError):
        skeletonize(Volume(np.zeros((4, 4, 4), dtype=np.uint8)))


def test_grupo_mais_proximo_empate_vence_o_primeiro():
    mascara = np.ones((5, 1, 1), dtype=bool)
    rotulos = nearest_group_labels(mascara, [(7, [(0, 0, 0)]), (3, [(4, 0, 0)])], (1.0, 1.0, 1.0))
    assert rotulos[:, 0, 0].tolist() == [7, 7, 7, 3, 3]


def test_propagacao_reproduz_suporte_da_mascara(y_skeleton):
    tree = parse_branches(y_skeleton, ROOT)
    mascara = dilate(y_skeleton, 1)
    rotulado = propagate_labels(tree, {1: 1, 2: 2, 3: 3}, mascara)
    assert np.array_equal(rotulado.data > 0, as_mask(mascara))
    assert rotulado.data[5, 5, 5] == 1
    assert rotulado.data[3, 5, 3] == 2
    assert rotulado.data[7, 5, 3] == 3


def test_propagacao_rejeita_classe_invalida(y_skeleton):
    tree = parse_branches(y_skeleton, ROOT)
    with pytest.raises(UsageError):
        propagate_labels(tree, {1: 1, 2: 0, 3: 3}, y_skeleton)
    with pytest.raises(UsageError):
        propagate_labels(tree, {1: 1, 2: 2}, y_skeleton)


def test_propagacao_em_grade_diferente(y_skeleton):
    tree = parse_branches(y_skeleton, ROOT)
    with pytest.raises(GeometryMismatchError):
        propagate_labels(tree, {1: 1, 2: 1, 3: 1}, Volume(np.zeros((3, 3, 3), dtype=np.uint8)))


def test_comprimento_dentro_da_predicao(y_skeleton):
    tree = parse_branches(y_skeleton, ROOT)
    completo = skeleton_length_inside(tree, dilate(y_skeleton, 1))
    assert completo == pytest.approx({b.branch_id: b.length_mm for b in tree.branches})
    vazio = skeleton_length_inside(tree, Volume(np.zeros(y_skeleton.dims, dtype=np.uint8)))
    assert set(vazio.values()) == {0.0}


def test_tubo_reto_tem_um_unico_ramo_sobre_o_eixo(tube):
    tree = skeletonize(tube)
    assert len(tree.branches) == 1
    assert tree.leaves() == []
    eixo = (np.asarray(tube.dims[:2]) - 1) / 2.0
    desvios = [math.hypot(v[0] - eixo[0], v[1] - eixo[1]) for v in tree.branches[0].voxels]
    assert max(desvios) <= 1.0


@pytest.mark.slow
@pytest.mark.parametrize('semente', [0, 1, 2])
def test_phantom_de_quatro_geracoes_recupera_todos_os_ramos(semente):
    phantom = generate_phantom(PhantomSpec(generations=4, seed=semente))
    tree = skeletonize(phantom.gt_mask)
    assert len(phantom.gt_tree.branches) == 15
    assert len(tree.branches) == len(phantom.gt_tree.branches)
    assert len(tree.leaves()) == 8
