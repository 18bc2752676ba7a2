from dotenv import load_dotenv

load_dotenv()

from src.backend.cli.commands import main  # noqa: E402


if __name__ == "__main__":
    raise SystemExit(main())
