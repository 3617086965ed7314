use std::fs;
use std::sync::Arc;

use lamp_core::gateway::remote::RemoteBackend;
use lamp_core::{ChatBackend, Gateway, LampError, MockModel, ModelEndpoint, Result, TaskTemplate};

use crate::args::EndpointArgs;

/// A model endpoint plus the backend that answers it, from which gateways
/// are built per audit.
#[derive(Clone)]
pub struct Backend {
    pub endpoint: ModelEndpoint,
    pub task: TaskTemplate,
    pub chat: Arc<dyn ChatBackend>,
    pub embed_transcript: bool,
}

impl Backend {
    pub fn from_args(args: &EndpointArgs) -> Result<Self> {
        let task = TaskTemplate::resolve(&args.task)?;
        let (mut endpoint, chat): (ModelEndpoint, Arc<dyn ChatBackend>) = if let Some(name) = &args.mock {
            let model =
                MockModel::preset(name).ok_or_else(|| LampError::Parameter(format!("unknown mock preset `{name}`")))?;
            (ModelEndpoint::mock(format!("mock-{name}")), Arc::new(model))
        } else if let Some(path) = &args.mock_file {
            let model = MockModel::from_json(&fs::read_to_string(path)?)
                .map_err(|e| LampError::Parameter(format!("mock file {}: {e}", path.display())))?;
            let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("file");
            (ModelEndpoint::mock(format!("mock-{stem}")), Arc::new(model))
        } else {
            let (endpoint, backend) = RemoteBackend::from_env(args.model.clone())?;
            (endpoint, Arc::new(backend))
        };
        if let Some(n) = args.max_in_flight {
            endpoint.max_in_flight = n;
        }
        if let Some(n) = args.max_retries {
            endpoint.max_retries = n;
        }
        if let Some(t) = args.temperature {
            endpoint.temperature = t;
        }
        endpoint.validate()?;
        Ok(Self { endpoint, task, chat, embed_transcript: args.embed_transcript })
    }

    pub fn gateway(&self) -> Result<Gateway> {
        self.gateway_for(self.task.clone())
    }

    pub fn gateway_for(&self, task: TaskTemplate) -> Result<Gateway> {
        Ok(Gateway::new(self.endpoint.clone(), task, self.chat.clone())?.embed_exchanges(self.embed_transcript))
    }
}
