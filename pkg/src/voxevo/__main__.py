from voxevo.cli import main

raise SystemExit(main())
