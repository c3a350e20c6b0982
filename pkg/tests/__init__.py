# テストパッケージの初期化ファイル
