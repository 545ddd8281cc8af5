from ssdc.cli import main

raise SystemExit(main())
