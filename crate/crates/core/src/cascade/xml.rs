//! Reader for the legacy `opencv-haar-classifier` XML layout.
//!
//! ```text
//! <opencv_storage>
//!   <name type_id="opencv-haar-classifier">
//!     <size>W H</size>
//!     <stages>
//!       <_>
//!         <trees>
//!           <_>                       one tree
//!             <_>                     its single node
//!               <feature><rects><_>x y w h weight</_>...</rects><tilted>0</tilted></feature>
//!               <threshold/> <left_val/> <right_val/>
//!             </_>
//!           </_>
//!         </trees>
//!         <stage_threshold/>
//!       </_>
//!     </stages>
//!   </name>
//! </opencv_storage>
//! ```

use roxmltree::{Document, Node};

use super::{CascadeError, CascadeModel, FeaturePart, HaarFeature, Stage, WeakStump};

pub fn parse_cascade_xml(text: &str) -> Result<CascadeModel, CascadeError> {
    let doc = Document::parse(text).map_err(|e| CascadeError::Xml(e.to_string()))?;
    let root = doc.root_element();
    let cascade = if is_cascade(root) {
        root
    } else {
        elements(root)
            .find(|n| is_cascade(*n))
            .ok_or_else(|| CascadeError::MissingElement {
                element: "size",
                context: "cascade root".into(),
            })?
    };

    let size = child(cascade, "size", "cascade root")?;
    let dims = numbers::<u32>(size, "size")?;
    let [window_w, window_h] = dims[..] else {
        return Err(CascadeError::MalformedNumber {
            value: text_of(size).to_string(),
            context: "size".into(),
        });
    };

    let stages_node = child(cascade, "stages", "cascade root")?;
    let mut stages = Vec::new();
    for (si, stage_node) in elements(stages_node).enumerate() {
        stages.push(parse_stage(stage_node, si)?);
    }

    let model = CascadeModel {
        window_w,
        window_h,
        stages,
    };
    model.validate()?;
    Ok(model)
}

fn parse_stage(node: Node, si: usize) -> Result<Stage, CascadeError> {
    let ctx = format!("stage {si}");
    let trees = child(node, "trees", &ctx)?;
    let mut stumps = Vec::new();
    for tree in elements(trees) {
        let mut nodes = elements(tree);
        let first = nodes.next().ok_or_else(|| CascadeError::MissingElement {
            element: "_",
            context: format!("{ctx} tree"),
        })?;
        if nodes.next().is_some() || find(first, "left_node").is_some() || find(first, "right_node").is_some() {
            return Err(CascadeError::TreeTooDeep { stage: si });
        }
        stumps.push(parse_stump(first, si, &ctx)?);
    }
    let threshold = find(node, "stage_threshold").ok_or(CascadeError::MissingStageThreshold { stage: si })?;
    Ok(Stage {
        stumps,
        stage_threshold: number(threshold, "stage_threshold")?,
    })
}

fn parse_stump(node: Node, si: usize, ctx: &str) -> Result<WeakStump, CascadeError> {
    let feature = child(node, "feature", ctx)?;
    if let Some(tilted) = find(feature, "tilted") {
        if number::<i64>(tilted, "tilted")? != 0 {
            return Err(CascadeError::TiltedFeature { stage: si });
        }
    }
    let rects = child(feature, "rects", ctx)?;
    let mut parts = Vec::new();
    for rect in elements(rects) {
        let text = text_of(rect);
        let fields: Vec<&str> = text.split_whitespace().collect();
        let malformed = || CascadeError::MalformedNumber {
            value: text.to_string(),
            context: format!("{ctx} rect"),
        };
        if fields.len() != 5 {
            return Err(malformed());
        }
        let coord = |s: &str| s.parse::<u32>().map_err(|_| malformed());
        parts.push(FeaturePart {
            x: coord(fields[0])?,
            y: coord(fields[1])?,
            w: coord(fields[2])?,
            h: coord(fields[3])?,
            weight: fields[4].parse::<f64>().map_err(|_| malformed())?,
        });
    }
    Ok(WeakStump {
        feature: HaarFeature { parts },
        threshold: number(child(node, "threshold", ctx)?, "threshold")?,
        left_value: number(child(node, "left_val", ctx)?, "left_val")?,
        right_value: number(child(node, "right_val", ctx)?, "right_val")?,
    })
}

fn is_cascade(node: Node) -> bool {
    find(node, "size").is_some() && find(node, "stages").is_some()
}

fn elements<'a, 'i>(node: Node<'a, 'i>) -> impl Iterator<Item = Node<'a, 'i>> {
    node.children().filter(|n| n.is_element())
}

fn find<'a, 'i>(node: Node<'a, 'i>, name: &str) -> Option<Node<'a, 'i>> {
    elements(node).find(|n| n.tag_name().name() == name)
}

fn child<'a, 'i>(node: Node<'a, 'i>, name: &'static str, ctx: &str) -> Result<Node<'a, 'i>, CascadeError> {
    find(node, name).ok_or_else(|| CascadeError::MissingElement {
        element: name,
        context: ctx.to_string(),
    })
}

fn text_of<'a>(node: Node<'a, '_>) -> &'a str {
    node.text().unwrap_or("").trim()
}

fn number<T: std::str::FromStr>(node: Node, ctx: &str) -> Result<T, CascadeError> {
    let text = text_of(node);
    text.parse().map_err(|_| CascadeError::MalformedNumber {
        value: text.to_string(),
        context: ctx.to_string(),
    })
}

fn numbers<T: std::str::FromStr>(node: Node, ctx: &str) -> Result<Vec<T>, CascadeError> {
    text_of(node)
        .split_whitespace()
        .map(|s| {
            s.parse().map_err(|_| CascadeError::MalformedNumber {
                value: s.to_string(),
                context: ctx.to_string(),
            })
        })
        .collect()
}
