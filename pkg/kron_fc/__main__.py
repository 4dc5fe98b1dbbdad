from kron_fc.cli import main


raise SystemExit(main())
