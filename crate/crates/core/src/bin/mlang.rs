use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use mlang_core::motion::Part;
use mlang_core::pipeline::{
    error_json, exit_code, run, Command, ExportFormat, ExportRequest, GenerateMode, GenerateRequest, Phase,
    PipelineConfig,
};

/// Speech, text and body-motion language modeling pipeline.
#[derive(Parser, Debug)]
#[command(name = "mlang", version)]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
    #[command(flatten)]
    common: Common,
}

#[derive(Args, Debug)]
struct Common {
    /// JSON config file; keys are layered over the preset it names.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed, overriding the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Dotted-path override, e.g. `posttrain.epochs=20`. Repeatable.
    #[arg(long = "override", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
}

#[derive(Subcommand, Debug)]
enum Cmd {
    /// Write the synthetic paired corpus.
    SynthData,
    /// Train the four part codecs and the translation predictor.
    CodecTrain,
    /// Fit the acoustic codebook.
    AudioFit,
    /// Train the subword tokenizer.
    TextTrain,
    /// Build the unified vocabulary.
    VocabBuild,
    /// Compile task corpora for one training phase.
    TasksCompile {
        /// pretrain or posttrain
        phase: Phase,
    },
    /// Pre-train the language model.
    Pretrain,
    /// Post-train on instruction tasks.
    Posttrain,
    /// Generate from the post-trained model.
    Generate(GenerateArgs),
    /// Evaluate on the validation clips and write the metrics report.
    Eval,
    /// Export a motion-json file as marker CSV or motion-json.
    Export {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
        /// csv or json
        #[arg(long, default_value = "csv")]
        format: ExportFormat,
    },
}

#[derive(Args, Debug)]
struct GenerateArgs {
    /// audio2motion, text2motion, motion2emotion or editable
    #[arg(long)]
    mode: GenerateMode,
    /// WAV file (audio2motion, editable).
    #[arg(long)]
    audio: Option<PathBuf>,
    /// Text prompt (text2motion, editable).
    #[arg(long)]
    caption: Option<String>,
    /// Motion-json file (motion2emotion).
    #[arg(long)]
    motion: Option<PathBuf>,
    /// Output length in frames.
    #[arg(long)]
    frames: Option<usize>,
    /// Parts driven by the caption in editable mode.
    #[arg(long = "text-part", default_values = ["lower"])]
    text_parts: Vec<Part>,
    #[arg(long)]
    output: PathBuf,
    /// Model directory instead of the post-trained model.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
}

fn command(cmd: Cmd) -> Command {
    match cmd {
        Cmd::SynthData => Command::SynthData,
        Cmd::CodecTrain => Command::CodecTrain,
        Cmd::AudioFit => Command::AudioFit,
        Cmd::TextTrain => Command::TextTrain,
        Cmd::VocabBuild => Command::VocabBuild,
        Cmd::TasksCompile { phase } => Command::TasksCompile(phase),
        Cmd::Pretrain => Command::Pretrain,
        Cmd::Posttrain => Command::Posttrain,
        Cmd::Generate(g) => Command::Generate(GenerateRequest {
            mode: g.mode,
            audio: g.audio,
            caption: g.caption,
            motion: g.motion,
            frames: g.frames,
            text_parts: g.text_parts,
            output: g.output,
            checkpoint: g.checkpoint,
        }),
        Cmd::Eval => Command::Eval,
        Cmd::Export { input, output, format } => Command::Export(ExportRequest { input, output, format }),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = PipelineConfig::load(cli.common.config.as_deref(), cli.common.seed, &cli.common.overrides)
        .and_then(|config| run(&command(cli.command), &config));
    match result {
        Ok(summary) => {
            println!("{summary}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("{}", error_json(&e));
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}
