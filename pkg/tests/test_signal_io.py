"""The .sig container, PNG helpers and the signal store"""
import json

import numpy as np
import pytest
from PIL import Image

from src.exceptions import ShapeError, SignalFormatError
from src.signal_io import (
    SignalStore, atom_mosaic, load_png, load_signal, read_sig, read_sig_header, save_png,
    signal_shape, to_uint8, write_sig,
)
from src.synthetic import gaussian_dictionary
from src.tensor_core import ActivationMap, Signal


class TestSigContainer:

    def test_write_and_read_signal(self, tmp_path, rng):
        X = Signal(rng.randn(12, 7, 3))
        path = write_sig(tmp_path / 'x.sig', X, meta={'source': 'test'})
        header = read_sig_header(path)
        assert header['d'] == 2
        assert header['sizes'] == [12, 7]
        assert header['channels'] == 3
        assert header['dtype'] == 'f64'
        assert header['kind'] == 'signal'
        assert header['meta'] == {'source': 'test'}
        loaded = read_sig(path, expected_kind='signal')
        assert isinstance(loaded, Signal)
        np.testing.assert_array_equal(loaded.values, X.values)

    def test_payload_is_little_endian_float64(self, tmp_path):
        X = Signal(np.array([[1.0], [-2.5]]))
        path = write_sig(tmp_path / 'x.sig', X)
        raw = path.read_bytes()
        header, payload = raw.split(b'\n', 1)
        assert json.loads(header)['sizes'] == [2]
        np.testing.assert_array_equal(np.frombuffer(payload, dtype='<f8'), [1.0, -2.5])

    def test_dictionary_keeps_atoms_leading(self, tmp_path):
        D = gaussian_dictionary(3, (4, 2), 2, seed=0)
        path = write_sig(tmp_path / 'd.sig', D)
        header = read_sig_header(path)
        assert header['sizes'] == [4, 2] and header['channels'] == 2
        assert header['atoms'] == 3
        _, payload = path.read_bytes().split(b'\n', 1)
        np.testing.assert_array_equal(np.frombuffer(payload, dtype='<f8'), D.values.ravel())
        np.testing.assert_array_equal(read_sig(path, 'dictionary').values, D.values)

    def test_activation_is_stored_channels_last(self, tmp_path, rng):
        Z = ActivationMap(rng.randn(3, 5, 4))
        path = write_sig(tmp_path / 'z.sig', Z)
        header = read_sig_header(path)
        assert header['sizes'] == [5, 4] and header['channels'] == 3
        _, payload = path.read_bytes().split(b'\n', 1)
        stored = np.frombuffer(payload, dtype='<f8').reshape(5, 4, 3)
        np.testing.assert_array_equal(stored, np.moveaxis(Z.values, 0, -1))
        np.testing.assert_array_equal(read_sig(path, 'activation').values, Z.values)

    def test_header_with_only_the_required_keys(self, tmp_path):
        values = np.arange(12, dtype='<f8')
        path = tmp_path / 'plain.sig'
        header = {'d': 1, 'sizes': [6], 'channels': 2, 'dtype': 'f64'}
        path.write_bytes(json.dumps(header).encode('utf-8') + b'\n' + values.tobytes())

        X = read_sig(path)
        assert isinstance(X, Signal)
        np.testing.assert_array_equal(X.values, values.reshape(6, 2))

        # without "atoms" the leading axis is inferred from the payload
        header = {'d': 1, 'sizes': [3], 'channels': 2, 'dtype': 'f64'}
        path.write_bytes(json.dumps(header).encode('utf-8') + b'\n' + values.tobytes())
        D = read_sig(path, expected_kind='dictionary')
        assert D.values.shape == (2, 3, 2)
        assert signal_shape(path) == (3, 2)

    def test_kind_mismatch(self, tmp_path):
        path = write_sig(tmp_path / 'd.sig', gaussian_dictionary(2, (3,), 1, seed=0))
        with pytest.raises(ShapeError):
            read_sig(path, expected_kind='activation')

    def test_missing_file(self, tmp_path):
        with pytest.raises(SignalFormatError):
            read_sig(tmp_path / 'absent.sig')

    @pytest.mark.parametrize('header', [
        {'format': 'other'},
        {'d': 1, 'sizes': [4], 'channels': 1, 'dtype': 'f32'},
        {'d': 2, 'sizes': [4], 'channels': 1, 'dtype': 'f64'},
        {'d': 1, 'sizes': [4], 'channels': 1, 'dtype': 'f64', 'kind': 'tensor'},
        [1, 2],
    ])
    def test_bad_header(self, tmp_path, header):
        path = tmp_path / 'bad.sig'
        path.write_bytes(json.dumps(header).encode() + b'\n' + bytes(32))
        with pytest.raises(SignalFormatError):
            read_sig(path)

    def test_header_not_json(self, tmp_path):
        path = tmp_path / 'bad.sig'
        path.write_bytes(b'not json\n\x00\x00')
        with pytest.raises(SignalFormatError):
            read_sig(path)

    def test_truncated_payload(self, tmp_path):
        path = write_sig(tmp_path / 'z.sig', ActivationMap(np.ones((2, 5))))
        path.write_bytes(path.read_bytes()[:-8])
        with pytest.raises(SignalFormatError):
            read_sig(path)

    def test_unsupported_object(self, tmp_path):
        with pytest.raises(SignalFormatError):
            write_sig(tmp_path / 'a.sig', np.zeros(3))


class TestImages:

    def test_rgb_png_in_unit_range(self, tmp_path):
        arr = np.zeros((6, 5, 3), dtype=np.uint8)
        arr[2, 3] = [255, 0, 128]
        Image.fromarray(arr).save(tmp_path / 'img.png')
        X = load_png(tmp_path / 'img.png')
        assert X.values.shape == (6, 5, 3)
        assert X.values.max() == 1.0 and X.values.min() == 0.0
        gray = load_signal(tmp_path / 'img.png', grayscale=True)
        assert gray.values.shape == (6, 5, 1)

    def test_gray_png_keeps_one_channel(self, tmp_path):
        arr = np.zeros((4, 7), dtype=np.uint8)
        arr[1, 2] = 255
        arr[3, 6] = 51
        Image.fromarray(arr).save(tmp_path / 'gray.png')
        X = load_png(tmp_path / 'gray.png')
        assert X.values.shape == (4, 7, 1)
        assert X.values[1, 2, 0] == 1.0
        assert X.values[3, 6, 0] == pytest.approx(0.2)

    def test_sixteen_bit_gray_png(self, tmp_path):
        arr = np.zeros((3, 3), dtype=np.uint16)
        arr[0, 0] = 65535
        Image.fromarray(arr).save(tmp_path / 'deep.png')
        X = load_png(tmp_path / 'deep.png')
        assert X.values.shape == (3, 3, 1)
        assert X.values[0, 0, 0] == pytest.approx(1.0)
        assert X.values[1, 1, 0] == 0.0

    def test_max_size(self, tmp_path):
        Image.fromarray(np.zeros((40, 20), dtype=np.uint8)).save(tmp_path / 'big.png')
        X = load_png(tmp_path / 'big.png', grayscale=True, max_size=10)
        assert max(X.values.shape[:2]) == 10

    def test_unreadable_image(self, tmp_path):
        path = tmp_path / 'broken.png'
        path.write_bytes(b'nope')
        with pytest.raises(SignalFormatError):
            load_png(path)

    def test_to_uint8(self):
        np.testing.assert_array_equal(to_uint8(np.array([-1.0, 0.0, 1.0])), [0, 128, 255])
        assert not np.any(to_uint8(np.full(3, 7.0)))

    def test_save_png(self, tmp_path, rng):
        path = save_png(tmp_path / 'out' / 'x.png', rng.randn(8, 9, 1))
        with Image.open(path) as img:
            assert img.size == (9, 8)
        with pytest.raises(ShapeError):
            save_png(tmp_path / 'y.png', rng.randn(2, 2, 2, 2))

    def test_atom_mosaic(self):
        D = gaussian_dictionary(5, (4, 3), 1, seed=0)
        mosaic = atom_mosaic(D)
        # 3 columns, 2 rows, 1 pixel padding
        assert mosaic.shape == (2 * 5 + 1, 3 * 4 + 1, 1)
        with pytest.raises(ShapeError):
            atom_mosaic(gaussian_dictionary(2, (4,), 1, seed=0))


class TestSignalStore:

    def test_save_load_and_list(self, tmp_path, rng):
        store = SignalStore(tmp_path / 'store')
        store.save('X', Signal(rng.randn(10, 2)))
        store.save('D.sig', gaussian_dictionary(2, (3,), 2, seed=0))
        assert store.list() == ['D', 'X']
        assert store.exists('X') and not store.exists('Z')
        assert store.load('D', expected_kind='dictionary').n_atoms == 2
        stats = store.get_stats()
        assert stats['written'] == 2 and stats['read'] == 1
        assert stats['bytes_written'] > 0

    def test_manifest(self, tmp_path):
        store = SignalStore(tmp_path)
        assert store.read_manifest() is None
        store.write_manifest({'iteration': 3})
        assert store.read_manifest() == {'iteration': 3}


def test_signal_shape(tmp_path):
    path = write_sig(tmp_path / 'x.sig', Signal(np.zeros((4, 4, 2))))
    assert signal_shape(path) == (4, 4, 2)
    assert load_signal(path).values.shape == (4, 4, 2)
