//! Every chapter of the guide in `book/src` is included here so that its
//! Rust snippets run under `cargo test --doc`.

macro_rules! chapters {
    ($($name:ident => $file:literal),* $(,)?) => {
        $(
            #[cfg(doctest)]
            #[doc = include_str!(concat!("../../../book/src/", $file))]
            pub mod $name {}
        )*
    };
}

chapters! {
    introduction => "introduction.md",
    fourier => "fourier.md",
    channels => "channels.md",
    random_operators => "random_operators.md",
    rounding => "rounding.md",
    games => "games.md",
    pipeline => "pipeline.md",
    cli => "cli.md",
}
