"""
Platform-specific utilities
Resolves config and data directories on Windows, macOS, and Linux
"""
import os
import platform
import shutil
from pathlib import Path

HOME_ENV = "EVOCONV_HOME"
CONFIG_NAME = "evoconv.yml"


def get_platform():
    """Returns: 'windows', 'macos', or 'linux'"""
    system = platform.system().lower()
    if system == 'darwin':
        return 'macos'
    return system


def is_windows():
    return get_platform() == 'windows'


def is_macos():
    return get_platform() == 'macos'


def home_override():
    """EVOCONV_HOME as a Path, or None when unset"""
    value = os.getenv(HOME_ENV, '').strip()
    return Path(value) if value else None


def get_config_dir():
    """
    Get platform-appropriate config directory

    EVOCONV_HOME set: $EVOCONV_HOME/config
    Otherwise:
      - macOS: ~/Library/Application Support/evoconv
      - Windows: ~/AppData/Local/evoconv
      - Linux: ~/.config/evoconv
    """
    home = home_override()
    if home is not None:
        return home / 'config'

    if is_windows():
        return Path.home() / 'AppData' / 'Local' / 'evoconv'
    elif is_macos():
        return Path.home() / 'Library' / 'Application Support' / 'evoconv'
    else:
        return Path.home() / '.config' / 'evoconv'


def get_data_dir():
    """
    Get platform-appropriate data directory (logs live here)

    EVOCONV_HOME set: $EVOCONV_HOME/data
    Otherwise:
      - macOS: ~/Library/Application Support/evoconv/data
      - Windows: ~/AppData/Local/evoconv/data
      - Linux: ~/.local/share/evoconv
    """
    home = home_override()
    if home is not None:
        return home / 'data'

    if is_windows():
        return Path.home() / 'AppData' / 'Local' / 'evoconv' / 'data'
    elif is_macos():
        return Path.home() / 'Library' / 'Application Support' / 'evoconv' / 'data'
    else:
        return Path.home() / '.local' / 'share' / 'evoconv'


def ensure_directories():
    """Create all necessary directories if they don't exist"""
    dirs = {
        'config': get_config_dir(),
        'data': get_data_dir(),
    }

    for path in dirs.values():
        path.mkdir(parents=True, exist_ok=True)

    return dirs


def template_config_path():
    """The default config shipped with the package"""
    return Path(__file__).parent.parent / 'config' / CONFIG_NAME


def setup_initial_config():
    """
    Copy the default config file to the user config directory on first run

    Returns:
        Path of the user config file, or None if the template is missing
    """
    dest = get_config_dir() / CONFIG_NAME
    if dest.exists():
        return dest

    template = template_config_path()
    if not template.exists():
        return None

    dest.parent.mkdir(parents=True, exist_ok=True)
    shutil.copy2(template, dest)
    return dest
