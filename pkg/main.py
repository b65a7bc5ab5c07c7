#main.py

#Entry point: python main.py <command> --config configs/desk.yaml
from src.cli import main

if __name__ == "__main__":
    main()
