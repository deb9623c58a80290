"""fed-trajprep - Entry point for pip installation"""
import sys
from pathlib import Path

# 包根目录加入路径，使 core / services / main 可导入
pkg_root = Path(__file__).resolve().parent.parent
if str(pkg_root) not in sys.path:
    sys.path.insert(0, str(pkg_root))

__version__ = "0.1.1"


def main():
    """Main entry point"""
    from main import main as app_main
    sys.exit(app_main())


if __name__ == "__main__":
    main()
