//! The fixed 12-task catalog, object shapes and instruction vocabulary.

use serde::{Deserialize, Serialize};

use super::SimError;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum TaskFamily {
    PickPlace,
    OpenArticulation,
    CloseArticulation,
    PressButton,
    TurnDial,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Variant {
    CounterToSink,
    SinkToCounter,
    SingleDoor,
    DoubleDoor,
    Drawer,
    CoffeeButton,
    MicrowaveButton,
    StoveOn,
    StoveOff,
}

/// Success predicate, evaluated on the world after every step.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Predicate {
    /// Object released with its center inside the named zone.
    ObjectInZone { zone: Zone },
    ArticulationAtLeast { threshold: f64 },
    ArticulationAtMost { threshold: f64 },
    ButtonPressed,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Zone {
    Counter,
    Sink,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskDef {
    pub name: String,
    pub category: String,
    pub family: TaskFamily,
    pub variant: Variant,
    /// Instruction template; `{object}` is replaced by the object name.
    pub template: String,
    pub predicate: Predicate,
    /// Articulation value at reset, when the task has a fixture.
    pub initial_articulation: f64,
}

/// One catalog entry instantiated with a layout and object.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TaskSpec {
    pub family: TaskFamily,
    pub variant: Variant,
    pub layout_seed: u64,
    pub object_id: usize,
}

pub const OBJECT_NAMES: [&str; 5] = ["apple", "mug", "bowl", "can", "sponge"];

pub const NUM_OBJECTS: usize = OBJECT_NAMES.len();

/// Every word any instruction can contain, in token-id order.
pub const VOCABULARY: [&str; 33] = [
    "pick", "the", "from", "counter", "and", "place", "it", "in", "sink", "on", "open",
    "close", "single", "double", "door", "of", "cabinet", "drawer", "press", "button",
    "coffee", "machine", "start", "microwave", "turn", "off", "stove", "burner", "apple",
    "mug", "bowl", "can", "sponge",
];

fn def(
    name: &str,
    category: &str,
    family: TaskFamily,
    variant: Variant,
    template: &str,
    predicate: Predicate,
    initial_articulation: f64,
) -> TaskDef {
    TaskDef {
        name: name.into(),
        category: category.into(),
        family,
        variant,
        template: template.into(),
        predicate,
        initial_articulation,
    }
}

/// The task catalog shared by data generation, training and evaluation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Catalog {
    pub tasks: Vec<TaskDef>,
}

pub const OPEN_THRESHOLD: f64 = 0.9;
pub const CLOSE_THRESHOLD: f64 = 0.1;

impl Catalog {
    pub fn standard() -> Self {
        use Predicate::*;
        use TaskFamily::*;
        use Variant::*;
        let open = ArticulationAtLeast {
            threshold: OPEN_THRESHOLD,
        };
        let close = ArticulationAtMost {
            threshold: CLOSE_THRESHOLD,
        };
        let pnp = "Pick and Place";
        let doors = "Open/Close Doors";
        let drawers = "Open/Close Drawers";
        let buttons = "Pressing Buttons";
        let knobs = "Twisting Knobs";
        Self {
            tasks: vec![
                def(
                    "PnPCounterToSink",
                    pnp,
                    PickPlace,
                    CounterToSink,
                    "pick the {object} from the counter and place it in the sink",
                    ObjectInZone { zone: Zone::Sink },
                    0.0,
                ),
                def(
                    "PnPSinkToCounter",
                    pnp,
                    PickPlace,
                    SinkToCounter,
                    "pick the {object} from the sink and place it on the counter",
                    ObjectInZone { zone: Zone::Counter },
                    0.0,
                ),
                def(
                    "OpenSingleDoor",
                    doors,
                    OpenArticulation,
                    SingleDoor,
                    "open the single door of the cabinet",
                    open,
                    0.5,
                ),
                def(
                    "CloseSingleDoor",
                    doors,
                    CloseArticulation,
                    SingleDoor,
                    "close the single door of the cabinet",
                    close,
                    0.5,
                ),
                def(
                    "OpenDoubleDoor",
                    doors,
                    OpenArticulation,
                    DoubleDoor,
                    "open the double door of the cabinet",
                    open,
                    0.5,
                ),
                def(
                    "CloseDoubleDoor",
                    doors,
                    CloseArticulation,
                    DoubleDoor,
                    "close the double door of the cabinet",
                    close,
                    0.5,
                ),
                def(
                    "OpenDrawer",
                    drawers,
                    OpenArticulation,
                    Drawer,
                    "open the drawer",
                    open,
                    0.5,
                ),
                def(
                    "CloseDrawer",
                    drawers,
                    CloseArticulation,
                    Drawer,
                    "close the drawer",
                    close,
                    0.5,
                ),
                def(
                    "CoffeePressButton",
                    buttons,
                    PressButton,
                    CoffeeButton,
                    "press the button on the coffee machine",
                    ButtonPressed,
                    0.0,
                ),
                def(
                    "TurnOnMicrowave",
                    buttons,
                    PressButton,
                    MicrowaveButton,
                    "press the start button on the microwave",
                    ButtonPressed,
                    0.0,
                ),
                def(
                    "TurnOnStove",
                    knobs,
                    TurnDial,
                    StoveOn,
                    "turn on the stove burner",
                    open,
                    0.0,
                ),
                def(
                    "TurnOffStove",
                    knobs,
                    TurnDial,
                    StoveOff,
                    "turn off the stove burner",
                    close,
                    1.0,
                ),
            ],
        }
    }

    pub fn len(&self) -> usize {
        self.tasks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tasks.is_empty()
    }

    pub fn lookup(&self, family: TaskFamily, variant: Variant) -> Result<&TaskDef, SimError> {
        self.tasks
            .iter()
            .find(|t| t.family == family && t.variant == variant)
            .ok_or_else(|| SimError::UnknownTask(format!("{family:?}/{variant:?}")))
    }

    pub fn by_name(&self, name: &str) -> Result<&TaskDef, SimError> {
        self.tasks
            .iter()
            .find(|t| t.name == name)
            .ok_or_else(|| SimError::UnknownTask(name.to_string()))
    }

    pub fn index_of(&self, family: TaskFamily, variant: Variant) -> Result<usize, SimError> {
        self.tasks
            .iter()
            .position(|t| t.family == family && t.variant == variant)
            .ok_or_else(|| SimError::UnknownTask(format!("{family:?}/{variant:?}")))
    }

    pub fn instruction(&self, task: &TaskSpec) -> Result<String, SimError> {
        let def = self.lookup(task.family, task.variant)?;
        let name = OBJECT_NAMES
            .get(task.object_id)
            .ok_or(SimError::UnknownObject(task.object_id))?;
        Ok(def.template.replace("{object}", name))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("catalog serializes")
    }

    pub fn categories(&self) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        for t in &self.tasks {
            if !out.contains(&t.category) {
                out.push(t.category.clone());
            }
        }
        out
    }
}

impl TaskDef {
    pub fn spec(&self, layout_seed: u64, object_id: usize) -> TaskSpec {
        TaskSpec {
            family: self.family,
            variant: self.variant,
            layout_seed,
            object_id,
        }
    }

    /// Tasks whose initial scene is identical to a sibling's, so only the
    /// instruction tells them apart.
    pub fn is_discrimination_task(&self) -> bool {
        matches!(
            self.family,
            TaskFamily::OpenArticulation | TaskFamily::CloseArticulation
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    #[test]
    fn twelve_unique_tasks() {
        let c = Catalog::standard();
        assert_eq!(c.len(), 12);
        let pairs: HashSet<_> = c.tasks.iter().map(|t| (t.family, t.variant)).collect();
        assert_eq!(pairs.len(), 12);
        let names: HashSet<_> = c.tasks.iter().map(|t| t.name.clone()).collect();
        assert_eq!(names.len(), 12);
    }

    #[test]
    fn every_template_word_in_vocabulary() {
        let c = Catalog::standard();
        let vocab = VOCABULARY;
        assert!(vocab.len() <= 64);
        for t in &c.tasks {
            for obj in 0..NUM_OBJECTS {
                let s = c.instruction(&t.spec(0, obj)).unwrap();
                for w in s.split_whitespace() {
                    assert!(vocab.contains(&w), "{w} missing");
                }
            }
        }
    }

    #[test]
    fn paired_tasks_differ_by_one_word() {
        let c = Catalog::standard();
        let words = |n: &str| -> Vec<String> {
            c.by_name(n)
                .unwrap()
                .template
                .split_whitespace()
                .map(String::from)
                .collect()
        };
        for (a, b) in [
            ("OpenSingleDoor", "CloseSingleDoor"),
            ("OpenDoubleDoor", "CloseDoubleDoor"),
            ("OpenSingleDoor", "OpenDoubleDoor"),
            ("CloseSingleDoor", "CloseDoubleDoor"),
            ("OpenDrawer", "CloseDrawer"),
        ] {
            let (wa, wb) = (words(a), words(b));
            assert_eq!(wa.len(), wb.len());
            assert_eq!(wa.iter().zip(&wb).filter(|(x, y)| x != y).count(), 1);
        }
    }

    #[test]
    fn pnp_instruction_names_both_zones() {
        let c = Catalog::standard();
        let t = c.by_name("PnPCounterToSink").unwrap();
        let s = c.instruction(&t.spec(42, 1)).unwrap();
        assert!(s.contains("counter") && s.contains("sink") && s.contains("mug"));
    }

    #[test]
    fn unknown_pair_rejected() {
        let c = Catalog::standard();
        assert!(c.lookup(TaskFamily::PickPlace, Variant::Drawer).is_err());
    }

    #[test]
    fn catalog_json_roundtrip() {
        let c = Catalog::standard();
        let back: Catalog = serde_json::from_str(&c.to_json()).unwrap();
        assert_eq!(back, c);
    }
}
