use crate::error::{Error, Result};

/// Per-pixel class indices of one image, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMask {
    height: usize,
    width: usize,
    labels: Vec<u8>,
}

impl LabelMask {
    pub fn new(height: usize, width: usize, labels: Vec<u8>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::InvalidShape(vec![height, width]));
        }
        if labels.len() != height * width {
            return Err(Error::ElementCount {
                from: vec![labels.len()],
                to: vec![height, width],
            });
        }
        Ok(LabelMask { height, width, labels })
    }

    pub fn filled(height: usize, width: usize, class: u8) -> Result<Self> {
        LabelMask::new(height, width, vec![class; height * width])
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn get(&self, y: usize, x: usize) -> u8 {
        self.labels[y * self.width + x]
    }

    /// Fails on the first label `>= classes`.
    pub fn check_classes(&self, classes: usize) -> Result<()> {
        match self.labels.iter().find(|&&l| l as usize >= classes) {
            Some(&l) => Err(Error::ClassOutOfRange {
                value: l as usize,
                classes,
            }),
            None => Ok(()),
        }
    }

    /// Pixel count per class.
    pub fn histogram(&self, classes: usize) -> Vec<usize> {
        let mut h = vec![0; classes];
        for &l in &self.labels {
            if (l as usize) < classes {
                h[l as usize] += 1;
            }
        }
        h
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn class_bound_checked() {
        let m = LabelMask::new(1, 2, vec![3, 0]).unwrap();
        assert!(m.check_classes(4).is_ok());
        assert!(matches!(
            m.check_classes(3),
            Err(Error::ClassOutOfRange { value: 3, classes: 3 })
        ));
        assert_eq!(m.histogram(4), vec![1, 0, 0, 1]);
    }

    #[test]
    fn size_checked() {
        assert!(LabelMask::new(2, 2, vec![0; 3]).is_err());
        assert!(LabelMask::new(0, 2, vec![]).is_err());
    }
}
