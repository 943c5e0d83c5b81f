use std::fs::{self, File};
use std::path::{Path, PathBuf};
use std::process::{Command, Stdio};
use std::sync::atomic::{AtomicU64, Ordering};
use std::time::{Duration, Instant};

use serde::de::DeserializeOwned;
use serde::Serialize;

use super::protocol::{DoTrainResult, ResponseStatus, StageRequest, StageResponse};
use super::PluginDescriptor;
use crate::error::{Error, Result};
use crate::model::{Method, StageKind};
use crate::stages::builtin;
use crate::storage::{ensure_dir, put_document_atomic};

pub const DEFAULT_TIMEOUT: Duration = Duration::from_secs(300);

const POLL: Duration = Duration::from_millis(5);
const STDERR_LIMIT: usize = 4096;

/// Runs stage methods, either in-process for builtins or as an external process
/// talking through `request.json` / `response.json` in a private workdir.
#[derive(Debug)]
pub struct PluginHost {
    scratch: PathBuf,
    default_timeout: Duration,
    invocations: [AtomicU64; 4],
}

impl PluginHost {
    pub fn new(scratch: impl Into<PathBuf>, default_timeout: Duration) -> Self {
        Self {
            scratch: scratch.into(),
            default_timeout,
            invocations: Default::default(),
        }
    }

    pub fn default_timeout(&self) -> Duration {
        self.default_timeout
    }

    /// Number of method invocations served for `stage` since start-up.
    pub fn invocation_count(&self, stage: StageKind) -> u64 {
        self.invocations[stage as usize].load(Ordering::Relaxed)
    }

    /// Allocates a fresh, unique working directory.
    pub fn new_workdir(&self) -> PathBuf {
        self.scratch
            .join(format!("inv-{}", uuid::Uuid::new_v4().simple()))
    }

    /// Invokes one method and returns the plugin's response document.
    ///
    /// External plugins get `<request-path> <response-path>` appended to their
    /// entry command. The workdir is removed after a clean `ok` response and kept
    /// otherwise.
    pub fn invoke_stage(
        &self,
        plugin: &PluginDescriptor,
        request: &StageRequest,
        timeout: Option<Duration>,
    ) -> Result<StageResponse> {
        let stage = plugin.stage_kind.stage();
        if request.method.stage() != stage {
            return Err(Error::MethodStageMismatch {
                method: request.method.to_string(),
                stage: stage.to_string(),
            });
        }
        self.invocations[stage as usize].fetch_add(1, Ordering::Relaxed);
        if let Some(b) = plugin.builtin() {
            return Ok(builtin::handle(b, request));
        }
        let timeout = timeout.unwrap_or(self.default_timeout);
        let response = run_external(plugin, request, timeout)?;
        if response.status == ResponseStatus::Ok {
            let _ = fs::remove_dir_all(&request.workdir);
        }
        Ok(response)
    }

    /// Typed convenience over [`PluginHost::invoke_stage`]: builds the request,
    /// maps an `error` status to [`Error::PluginError`] and decodes the result.
    pub fn call<P: Serialize, R: DeserializeOwned>(
        &self,
        plugin: &PluginDescriptor,
        method: Method,
        payload: &P,
        timeout: Option<Duration>,
    ) -> Result<R> {
        let request = StageRequest::new(method, payload, self.new_workdir())?;
        let response = self.invoke_stage(plugin, &request, timeout)?;
        if response.status == ResponseStatus::Error {
            return Err(Error::PluginError(
                response
                    .error_message
                    .unwrap_or_else(|| "plugin reported an error without a message".into()),
            ));
        }
        if method == Method::DoTrain {
            let trained: DoTrainResult = serde_json::from_value(response.result.clone())
                .map_err(|e| Error::MalformedResponse(format!("doTrain result: {e}")))?;
            if !dir_non_empty(&trained.model_dir) {
                return Err(Error::MalformedResponse(format!(
                    "doTrain model_dir {} is missing or empty",
                    trained.model_dir.display()
                )));
            }
        }
        serde_json::from_value(response.result)
            .map_err(|e| Error::MalformedResponse(format!("{method} result: {e}")))
    }
}

fn dir_non_empty(path: &Path) -> bool {
    fs::read_dir(path)
        .map(|mut it| it.next().is_some())
        .unwrap_or(false)
}

fn run_external(plugin: &PluginDescriptor, request: &StageRequest, timeout: Duration) -> Result<StageResponse> {
    let workdir = &request.workdir;
    ensure_dir(workdir)?;
    let request_path = workdir.join("request.json");
    let response_path = workdir.join("response.json");
    put_document_atomic(&request_path, request)?;

    let plugin_dir = plugin.archive_path.clone().unwrap_or_else(|| workdir.clone());
    let plugin_dir_str = plugin_dir.to_string_lossy().into_owned();
    let mut argv = plugin
        .entry_command
        .iter()
        .map(|a| a.replace("{plugin_dir}", &plugin_dir_str));
    let program = argv
        .next()
        .ok_or_else(|| Error::ManifestInvalid(format!("plugin `{}` has no entry command", plugin.plugin_id)))?;
    let program = if let Some(rel) = program.strip_prefix("./") {
        plugin_dir.join(rel).to_string_lossy().into_owned()
    } else {
        program
    };

    let stdout_path = workdir.join("stdout.txt");
    let stderr_path = workdir.join("stderr.txt");
    let stdout = File::create(&stdout_path).map_err(|e| Error::io(&stdout_path, e))?;
    let stderr = File::create(&stderr_path).map_err(|e| Error::io(&stderr_path, e))?;

    let mut command = Command::new(&program);
    command
        .args(argv)
        .arg(&request_path)
        .arg(&response_path)
        .current_dir(&plugin_dir)
        .stdin(Stdio::null())
        .stdout(stdout)
        .stderr(stderr);
    #[cfg(unix)]
    {
        use std::os::unix::process::CommandExt;
        command.process_group(0);
    }
    let mut child = command.spawn().map_err(|e| Error::PluginCrashed {
        code: None,
        stderr: format!("cannot start `{program}`: {e}"),
    })?;

    let deadline = Instant::now() + timeout;
    let status = loop {
        match child.try_wait().map_err(|e| Error::io(workdir, e))? {
            Some(status) => break status,
            None if Instant::now() >= deadline => {
                kill_group(&mut child);
                return Err(Error::PluginTimeout(timeout));
            }
            None => std::thread::sleep(POLL),
        }
    };

    if !status.success() {
        let mut text = fs::read_to_string(&stderr_path).unwrap_or_default();
        if text.len() > STDERR_LIMIT {
            let mut cut = STDERR_LIMIT;
            while !text.is_char_boundary(cut) {
                cut -= 1;
            }
            text.truncate(cut);
        }
        return Err(Error::PluginCrashed {
            code: status.code(),
            stderr: text,
        });
    }

    let bytes = fs::read(&response_path)
        .map_err(|e| Error::MalformedResponse(format!("no response file: {e}")))?;
    serde_json::from_slice(&bytes).map_err(|e| Error::MalformedResponse(e.to_string()))
}

fn kill_group(child: &mut std::process::Child) {
    #[cfg(unix)]
    unsafe {
        // The child leads its own process group; take any grandchildren down too.
        libc::kill(-(child.id() as i32), libc::SIGKILL);
    }
    let _ = child.kill();
    let _ = child.wait();
}
