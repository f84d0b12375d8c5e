from metabias.cli import main

raise SystemExit(main())
