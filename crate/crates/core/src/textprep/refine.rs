use std::io::Write;
use std::process::{Command, Stdio};
use std::str::FromStr;

use crate::corpus::Platform;
use crate::error::{PemoeError, Result};

/// Caption refinement strategy.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Refiner {
    Identity,
    /// Prepends a fixed platform-focus prefix.
    TemplateStub,
    /// Runs `sh -c <template>` with `{platform}` replaced by the platform
    /// tag; the caption goes to stdin and stdout is the refined caption.
    ExternalCommand { template: String },
}

impl Refiner {
    pub fn template_prefix(platform: Platform) -> &'static str {
        match platform {
            Platform::Satellite => "aerial overview:",
            Platform::Drone => "oblique drone view:",
            Platform::Ground => "street-level view:",
        }
    }
}

impl FromStr for Refiner {
    type Err = PemoeError;

    /// `identity`, `template`, or `command:<shell template>`.
    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "identity" => Ok(Refiner::Identity),
            "template" | "template-stub" => Ok(Refiner::TemplateStub),
            other => match other.strip_prefix("command:") {
                Some(t) if !t.trim().is_empty() => Ok(Refiner::ExternalCommand {
                    template: t.trim().to_string(),
                }),
                _ => Err(PemoeError::invalid(
                    "refiner",
                    format!("`{other}` (expected identity, template, or command:<cmd>)"),
                )),
            },
        }
    }
}

pub fn refine_caption(caption: &str, platform: Platform, refiner: &Refiner) -> Result<String> {
    match refiner {
        Refiner::Identity => Ok(caption.to_string()),
        Refiner::TemplateStub => Ok(format!("{} {caption}", Refiner::template_prefix(platform))),
        Refiner::ExternalCommand { template } => run_external(template, caption, platform),
    }
}

fn run_external(template: &str, caption: &str, platform: Platform) -> Result<String> {
    let command = template.replace("{platform}", platform.tag());
    let fail = |status: String, stderr: String| PemoeError::ExternalCommand {
        command: command.clone(),
        status,
        stderr,
    };
    let mut child = Command::new("sh")
        .arg("-c")
        .arg(&command)
        .stdin(Stdio::piped())
        .stdout(Stdio::piped())
        .stderr(Stdio::piped())
        .spawn()
        .map_err(|e| fail("spawn failed".into(), e.to_string()))?;
    {
        let mut stdin = child.stdin.take().expect("stdin is piped");
        // A command that ignores stdin may close it early; that is not an error.
        let _ = stdin.write_all(caption.as_bytes());
    }
    let output = child
        .wait_with_output()
        .map_err(|e| fail("wait failed".into(), e.to_string()))?;
    let stderr = String::from_utf8_lossy(&output.stderr).trim().to_string();
    if !output.status.success() {
        return Err(fail(output.status.to_string(), stderr));
    }
    let mut refined = String::from_utf8(output.stdout)
        .map_err(|_| fail("invalid output".into(), "stdout is not UTF-8".into()))?;
    if !caption.ends_with('\n') && refined.ends_with('\n') {
        refined.pop();
        if refined.ends_with('\r') {
            refined.pop();
        }
    }
    if refined.trim().is_empty() {
        return Err(fail("empty output".into(), stderr));
    }
    Ok(refined)
}
