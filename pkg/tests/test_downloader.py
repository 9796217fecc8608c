import hashlib
import io
import tarfile

import pytest
import requests

from config import Config
from dataio import load_dataset
from downloader import ArchiveDownloader
from exceptions import IngestionError

URL = "https://example.invalid/data/archive.tar.gz"


def make_archive(files):
    buffer = io.BytesIO()
    with tarfile.open(fileobj=buffer, mode="w:gz") as tar:
        for name, payload in files.items():
            info = tarfile.TarInfo(name)
            info.size = len(payload)
            tar.addfile(info, io.BytesIO(payload))
    return buffer.getvalue()


def serve(monkeypatch, payload, calls=None):
    def fake_download(self, url, path):
        if calls is not None:
            calls.append(url)
        path.write_bytes(payload)
        return True
    monkeypatch.setattr(ArchiveDownloader, "download_file", fake_download)


class FakeResponse:
    def __init__(self, payload):
        self.payload = payload
        self.headers = {"content-length": str(len(payload))}

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        return False

    def raise_for_status(self):
        pass

    def iter_content(self, chunk_size):
        for start in range(0, len(self.payload), chunk_size):
            yield self.payload[start:start + chunk_size]


def test_verified_archive_is_extracted(monkeypatch, tmp_path):
    payload = make_archive({"folder/data.bin": b"\x01\x02\x03"})
    calls = []
    serve(monkeypatch, payload, calls)
    md5 = hashlib.md5(payload).hexdigest()

    archive = ArchiveDownloader().fetch_archive(URL, md5, tmp_path)
    assert archive == tmp_path / "archive.tar.gz"
    assert (tmp_path / "folder" / "data.bin").read_bytes() == b"\x01\x02\x03"

    ArchiveDownloader().fetch_archive(URL, md5, tmp_path)
    assert calls == [URL]


def test_checksum_mismatch_names_the_archive(monkeypatch, tmp_path):
    serve(monkeypatch, b"not the archive")
    with pytest.raises(IngestionError, match="Checksum mismatch") as excinfo:
        ArchiveDownloader().fetch_archive(URL, "0" * 32, tmp_path)
    assert excinfo.value.path == tmp_path / "archive.tar.gz"
    assert sorted(p.name for p in tmp_path.iterdir()) == ["archive.tar.gz"]


def test_failed_download(monkeypatch, tmp_path):
    monkeypatch.setattr(ArchiveDownloader, "download_file", lambda self, url, path: False)
    with pytest.raises(IngestionError) as excinfo:
        ArchiveDownloader().fetch_archive(URL, "0" * 32, tmp_path)
    assert excinfo.value.path == tmp_path / "archive.tar.gz"


def test_corrupt_download_builds_no_dataset(monkeypatch, tmp_path):
    serve(monkeypatch, b"truncated")
    with pytest.raises(IngestionError) as excinfo:
        load_dataset("cifar10", tmp_path, download=True)
    assert excinfo.value.path.name == Config.CIFAR10_URL.rsplit("/", 1)[-1]
    assert not (tmp_path / Config.CIFAR10_DIRNAME).exists()


def test_download_file_reports_progress(monkeypatch, tmp_path):
    payload = bytes(range(256)) * 10
    monkeypatch.setattr(requests, "get", lambda url, stream, timeout: FakeResponse(payload))
    updates = []
    downloader = ArchiveDownloader(progress_callback=lambda pct, msg: updates.append(pct))
    downloader.chunk_size = 1000

    assert downloader.download_file(URL, tmp_path / "file.bin")
    assert (tmp_path / "file.bin").read_bytes() == payload
    assert updates[-1] == pytest.approx(100.0)
    assert len(updates) == 3


def test_network_error_returns_false(monkeypatch, tmp_path):
    def refuse(url, stream, timeout):
        raise requests.exceptions.ConnectionError("offline")
    monkeypatch.setattr(requests, "get", refuse)
    assert not ArchiveDownloader().download_file(URL, tmp_path / "file.bin")
