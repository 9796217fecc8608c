import hashlib
import logging
import tarfile
from pathlib import Path

import requests
from tqdm import tqdm

from config import Config
from exceptions import IngestionError

logger = logging.getLogger(__name__)

class ArchiveDownloader:
    """
    Downloads dataset archives with progress tracking and checksum verification
    """

    def __init__(self, progress_callback=None):
        self.chunk_size = Config.CHUNK_SIZE
        self.timeout = Config.DOWNLOAD_TIMEOUT
        self.progress_callback = progress_callback

    def download_file(self, url, path):
        """
        Download a file with progress bar

        Args:
            url (str): URL to download from
            path (Path): Local path to save file

        Returns:
            bool: True if successful, False otherwise
        """
        try:
            logger.info(f"Starting download: {path.name}")

            with requests.get(url, stream=True, timeout=self.timeout) as r:
                r.raise_for_status()
                total = int(r.headers.get('content-length', 0))
                downloaded = 0

                with open(path, 'wb') as f:
                    with tqdm(
                        desc=path.name,
                        total=total,
                        unit='B',
                        unit_scale=True,
                        unit_divisor=1024,
                    ) as bar:
                        for chunk in r.iter_content(chunk_size=self.chunk_size):
                            if chunk:  # filter out keep-alive chunks
                                size = f.write(chunk)
                                downloaded += size
                                bar.update(size)

                                if self.progress_callback and total > 0:
                                    percentage = (downloaded / total) * 100
                                    self.progress_callback(percentage, f"Downloading {path.name}")

            logger.info(f"Successfully downloaded: {path.name}")
            return True

        except requests.exceptions.RequestException as e:
            logger.error(f"Network error downloading {url}: {e}")
            return False
        except IOError as e:
            logger.error(f"File I/O error saving to {path}: {e}")
            return False

    @staticmethod
    def md5sum(path):
        digest = hashlib.md5()
        with open(path, 'rb') as f:
            for block in iter(lambda: f.read(1 << 20), b''):
                digest.update(block)
        return digest.hexdigest()

    def fetch_archive(self, url, md5, root):
        """
        Download (if needed), verify and extract a .tar.gz archive into root

        Args:
            url (str): archive URL
            md5 (str): expected MD5 hex digest
            root (Path): directory to extract into

        Returns:
            Path: path of the verified archive
        """
        root = Path(root)
        root.mkdir(parents=True, exist_ok=True)
        archive = root / url.rsplit('/', 1)[-1]

        if archive.exists() and self.md5sum(archive) == md5:
            logger.info(f"Archive already present and verified: {archive}")
        else:
            if not self.download_file(url, archive):
                raise IngestionError(f"Failed to download {url}", archive)
            actual = self.md5sum(archive)
            if actual != md5:
                raise IngestionError(f"Checksum mismatch for {archive}: expected {md5}, got {actual}", archive)

        with tarfile.open(archive, 'r:gz') as tar:
            tar.extractall(root, filter='data')
        logger.info(f"Extracted {archive.name} into {root}")
        return archive
