"""Entry point for python -m compositional_inference"""

from compositional_inference.main import main

if __name__ == '__main__':
    main()
