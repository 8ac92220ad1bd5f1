use std::sync::Arc;

use crate::nlu::{ContextFrame, EntityKind, EntityRef, Intent, IntentResult, IntentSource};

use super::imdg::{Imdg, ImdgError};

const DEVICE_SLOT: &str = "device";

pub fn context_key(session_id: &str) -> String {
    format!("context/{session_id}")
}

/// Pure transition of the intra-conversational frame.
///
/// Unknown results leave the frame untouched. An explicit intent replaces
/// the active one; an inherited (entity-only) result keeps it. A named
/// entity becomes the active entity, carrying the device when the result
/// names one or when it is the same kind as before.
pub fn context_update(frame: &ContextFrame, result: &IntentResult) -> ContextFrame {
    if result.intent == Intent::Unknown || result.source == IntentSource::None {
        return frame.clone();
    }
    let mut next = frame.clone();
    if result.source == IntentSource::Explicit {
        next.active_intent = Some(result.intent);
    }
    let device = result.slot(DEVICE_SLOT).map(str::to_string);
    if result.entity != EntityKind::None {
        let carried = match &frame.active_entity {
            Some(prev) if prev.kind == result.entity => prev.device.clone(),
            _ => None,
        };
        next.active_entity = Some(EntityRef {
            kind: result.entity,
            device: device.or(carried),
        });
    }
    for (k, v) in &result.slots {
        next.slot_memory.insert(k.clone(), v.clone());
    }
    next
}

/// Stores frames in the grid, one per session.
#[derive(Debug, Clone)]
pub struct ContextManager {
    imdg: Arc<Imdg>,
}

impl ContextManager {
    pub fn new(imdg: Arc<Imdg>) -> Self {
        Self { imdg }
    }

    pub fn frame(&self, session_id: &str) -> Result<ContextFrame, ImdgError> {
        Ok(self.imdg.get_as(&context_key(session_id))?.unwrap_or_default())
    }

    pub fn apply(&self, session_id: &str, result: &IntentResult) -> Result<ContextFrame, ImdgError> {
        let key = context_key(session_id);
        let mut next = ContextFrame::default();
        self.imdg.update(&key, None, |current| {
            let frame: ContextFrame = current
                .and_then(|v| serde_json::from_value(v.clone()).ok())
                .unwrap_or_default();
            next = context_update(&frame, result);
            Some(serde_json::to_value(&next).expect("frame serializes"))
        })?;
        Ok(next)
    }
}
