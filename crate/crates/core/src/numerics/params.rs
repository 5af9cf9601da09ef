use super::{Matrix, Rng, Tape, Var};

#[derive(Clone, Debug, PartialEq)]
pub struct ParamEntry {
    pub name: String,
    pub value: Matrix,
    /// Buffers such as batch-norm running statistics are not trainable.
    pub trainable: bool,
}

/// Named tensors in declaration order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet {
    entries: Vec<ParamEntry>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, value: Matrix, trainable: bool) -> usize {
        self.entries.push(ParamEntry {
            name: name.into(),
            value,
            trainable,
        });
        self.entries.len() - 1
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn entries_mut(&mut self) -> &mut [ParamEntry] {
        &mut self.entries
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.entries.iter().position(|e| e.name == name)
    }

    pub fn get(&self, name: &str) -> Option<&Matrix> {
        self.entries.iter().find(|e| e.name == name).map(|e| &e.value)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Matrix> {
        self.entries
            .iter_mut()
            .find(|e| e.name == name)
            .map(|e| &mut e.value)
    }

    pub fn value(&self, index: usize) -> &Matrix {
        &self.entries[index].value
    }

    pub fn value_mut(&mut self, index: usize) -> &mut Matrix {
        &mut self.entries[index].value
    }

    /// Trainable entries become leaves, buffers become constants.
    pub fn bind(&self, tape: &mut Tape) -> Vec<Var> {
        self.entries
            .iter()
            .map(|e| {
                if e.trainable {
                    tape.leaf(e.value.clone())
                } else {
                    tape.constant(e.value.clone())
                }
            })
            .collect()
    }

    pub fn num_trainable_scalars(&self) -> usize {
        self.entries
            .iter()
            .filter(|e| e.trainable)
            .map(|e| e.value.len())
            .sum()
    }
}

/// Uniform in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`.
pub fn fan_in_uniform(rng: &mut Rng, rows: usize, cols: usize) -> Matrix {
    let bound = 1.0 / (rows as f64).sqrt();
    let data = (0..rows * cols)
        .map(|_| rng.uniform_range(-bound, bound))
        .collect();
    Matrix::raw(rows, cols, data)
}
