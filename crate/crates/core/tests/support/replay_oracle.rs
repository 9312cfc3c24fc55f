//! Expected active-agent behaviour for a scripted timeline, computed from
//! the rule alone: a tick requests advice iff the agent is enabled and some
//! interaction happened after the last tick that ran while enabled.

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Step {
    Interact,
    Toggle(bool),
    Tick,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Expected {
    Disabled,
    Skip,
    Fire,
}

/// `timeline` is in execution order; one entry per `Tick` is returned.
pub fn replay(timeline: &[(u64, Step)], initially_enabled: bool) -> Vec<Expected> {
    let mut out = Vec::new();
    let mut last_enabled_tick: Option<usize> = None;
    for (pos, &(_, step)) in timeline.iter().enumerate() {
        if step != Step::Tick {
            continue;
        }
        let enabled = timeline[..pos]
            .iter()
            .rev()
            .find_map(|(_, s)| match s {
                Step::Toggle(v) => Some(*v),
                _ => None,
            })
            .unwrap_or(initially_enabled);
        if !enabled {
            out.push(Expected::Disabled);
            continue;
        }
        let since = last_enabled_tick.map_or(0, |p| p + 1);
        let active = timeline[since..pos].iter().any(|(_, s)| *s == Step::Interact);
        out.push(if active { Expected::Fire } else { Expected::Skip });
        last_enabled_tick = Some(pos);
    }
    out
}
