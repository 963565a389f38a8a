//! HTTP front ends for an [`ActivityServer`]: the console API and a static
//! server for packaged tool artifacts.

use std::collections::BTreeMap;
use std::net::SocketAddr;
use std::path::PathBuf;

use axum::Router;
use coolda_core::engine::{static_cascade_report, CascadeGraph};
use coolda_core::model::{ActivityDefinition, ToolDescriptor};
use coolda_core::registry::ToolRegistry;
use tower_http::services::ServeDir;

pub mod api;

pub use api::console_router;

#[doc(no_inline)]
pub use coolda_core::server::ActivityServer;

/// Serves every file under `dir` as-is. Missing files are 404.
pub fn tools_router(dir: impl Into<PathBuf>) -> Router {
    Router::new().fallback_service(ServeDir::new(dir.into()))
}

/// A router running on its own runtime. Dropping it stops serving.
pub struct BackgroundHttp {
    addr: SocketAddr,
    runtime: Option<tokio::runtime::Runtime>,
}

impl BackgroundHttp {
    pub fn start(router: Router, addr: impl std::net::ToSocketAddrs) -> std::io::Result<Self> {
        let std_listener = std::net::TcpListener::bind(addr)?;
        std_listener.set_nonblocking(true)?;
        let addr = std_listener.local_addr()?;
        let runtime = tokio::runtime::Builder::new_multi_thread()
            .worker_threads(2)
            .enable_all()
            .build()?;
        let listener = {
            let _guard = runtime.enter();
            tokio::net::TcpListener::from_std(std_listener)?
        };
        runtime.spawn(async move {
            if let Err(e) = axum::serve(listener, router).await {
                tracing::error!("http server stopped: {e}");
            }
        });
        Ok(Self {
            addr,
            runtime: Some(runtime),
        })
    }

    pub fn local_addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn url(&self, path: &str) -> String {
        format!("http://{}{}", self.addr, path)
    }
}

impl Drop for BackgroundHttp {
    fn drop(&mut self) {
        if let Some(rt) = self.runtime.take() {
            rt.shutdown_background();
        }
    }
}

/// Resolves each slot's tool and runs the static cascade analysis. Slots whose
/// tool cannot be resolved are returned by url alongside the report and add
/// no command edges.
pub fn lint_definition(
    def: &ActivityDefinition,
    registry: &ToolRegistry,
) -> (CascadeGraph, Vec<(String, String)>) {
    let mut tools: BTreeMap<String, ToolDescriptor> = BTreeMap::new();
    let mut unresolved = Vec::new();
    for slot in &def.sub_activities {
        match registry.resolve(&slot.tool_url) {
            Ok(t) => {
                tools.insert(slot.slot_id.clone(), t.descriptor);
            }
            Err(e) => unresolved.push((slot.tool_url.clone(), e.to_string())),
        }
    }
    (static_cascade_report(def, &tools), unresolved)
}
